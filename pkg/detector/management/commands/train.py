"""
Train adapters, decoder and score head on a generated dataset
Usage: python manage.py train --dataset data/train --out runs/model
"""
from ._base import PipelineCommand


class Command(PipelineCommand):
    help = 'Zero-shot training, or few-shot finetuning with --finetune'
    kind = 'train'

    def add_command_arguments(self, parser):
        parser.add_argument('--dataset', type=str, default=None, help='Dataset directory written by gen')
        parser.add_argument('--iterations', type=int, default=None, help='Training iterations (default: 500)')
        parser.add_argument('--batch-size', type=int, default=None, help='Batch size (default: 8)')
        parser.add_argument('--lr', type=float, default=None, help='AdamW learning rate (default: 1e-4)')
        parser.add_argument('--rank', type=int, default=None, help='Adapter rank')
        parser.add_argument(
            '--positions',
            choices=['qv_proj', 'qkv_proj', 'all_norms', 'all_linears', 'none'],
            default=None,
            help='Where adapters are injected',
        )
        parser.add_argument('--finetune', type=str, default=None, metavar='CKPT', help='Finetune this checkpoint')
        parser.add_argument('--shots', type=int, default=None, help='Normal images used for finetuning (default: 4)')
        parser.add_argument('--finetune-iterations', type=int, default=None, help='Finetune iterations (default: 50)')

    def overrides(self, options):
        return {
            'paths.dataset': options['dataset'],
            'train.iterations': options['iterations'],
            'train.batch_size': options['batch_size'],
            'train.lr': options['lr'],
            'lora.rank': options['rank'],
            'lora.positions': options['positions'],
            'finetune.checkpoint': options['finetune'],
            'finetune.shots': options['shots'],
            'finetune.iterations': options['finetune_iterations'],
        }

    def emit(self, result):
        self.stdout.write(f"{result['checkpoint']} {result['sha256']}")
