import hashlib
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from detector.engine import datagen, procedural
from detector.engine.datagen import DatagenConfig, RegionR, SceneSpec
from detector.engine.errors import ConfigurationError, GenerationError, LeakageError, VocabularyError
from detector.engine.storage import TripletDataset
from detector.engine.vocabulary import TEXTURE_FAMILIES, load_vocabulary, split_vocabulary

VOCAB = load_vocabulary()


def raw_config(**overrides) -> DatagenConfig:
    values = dict(image_size=32, patch_size=4, extractor="raw", chunk_size=4, threshold=0.05)
    values.update(overrides)
    return DatagenConfig(**values)


def scene(seed: int = 0, size: int = 32) -> SceneSpec:
    return SceneSpec(VOCAB.objects[0], VOCAB.textures[0], seed, size)


def tree_digest(root: Path) -> dict:
    return {
        str(path.relative_to(root)): hashlib.sha256(path.read_bytes()).hexdigest()
        for path in sorted(root.rglob("*"))
        if path.is_file()
    }


class VocabularyTests(SimpleTestCase):
    def test_shipped_vocabulary(self):
        self.assertEqual(len(VOCAB.textures), 50)
        self.assertGreaterEqual(len(VOCAB.objects), 90)
        for obj in VOCAB.objects:
            self.assertTrue(VOCAB.anomalies_by_object[obj])

    def test_split_is_disjoint_and_seeded(self):
        train, held_out = split_vocabulary(VOCAB, 6, 2, seed=0)
        self.assertEqual(len(train), 6)
        self.assertEqual(len(held_out), 2)
        self.assertFalse(set(train) & set(held_out))
        self.assertEqual((train, held_out), split_vocabulary(VOCAB, 6, 2, seed=0))

    def test_split_too_large(self):
        with self.assertRaises(ConfigurationError):
            split_vocabulary(VOCAB, len(VOCAB.objects), 1, seed=0)


class GenerateNormalTests(SimpleTestCase):
    def test_deterministic(self):
        first, first_mask = datagen.generate_normal(scene(3), VOCAB)
        second, second_mask = datagen.generate_normal(scene(3), VOCAB)
        np.testing.assert_array_equal(first, second)
        np.testing.assert_array_equal(first_mask, second_mask)
        self.assertEqual(first.shape, (3, 32, 32))

    def test_different_seeds_differ(self):
        first, _ = datagen.generate_normal(scene(3), VOCAB)
        second, _ = datagen.generate_normal(scene(4), VOCAB)
        self.assertNotEqual(hashlib.sha256(first.tobytes()).digest(), hashlib.sha256(second.tobytes()).digest())

    def test_unknown_tag(self):
        with self.assertRaises(VocabularyError):
            datagen.generate_normal(SceneSpec("spaceship", VOCAB.textures[0], 0, 32), VOCAB)

    def test_foreground_coverage(self):
        for seed in range(1000):
            mask = procedural.foreground_mask(32, 32, (0.10, 0.60), np.random.default_rng(seed))
            self.assertTrue(0.10 <= mask.mean() <= 0.60, seed)

    def test_every_texture_family(self):
        rng = np.random.default_rng(0)
        for family in TEXTURE_FAMILIES:
            field = procedural.texture_field(family, 16, 16, rng)
            self.assertGreaterEqual(field.min(), 0.0)
            self.assertLessEqual(field.max(), 1.0)
        with self.assertRaises(GenerationError):
            procedural.texture_field("plaid", 16, 16, rng)


class RegionTests(SimpleTestCase):
    def test_single_foreground_pixel_is_the_center(self):
        fg_mask = np.zeros((256, 256), dtype=bool)
        fg_mask[200, 100] = True
        region = datagen.sample_region(fg_mask, (3, 9, 3, 9), np.random.default_rng(0))
        self.assertEqual((region.x, region.y), (100, 200))
        self.assertTrue(3 <= region.w <= 9 and 3 <= region.h <= 9)

    def test_empty_foreground(self):
        with self.assertRaises(GenerationError):
            datagen.sample_region(np.zeros((8, 8), dtype=bool), (1, 2, 1, 2), np.random.default_rng(0))

    def test_clipping(self):
        x0, y0, x1, y1 = RegionR(x=10, y=10, w=350, h=100).box(1024, 1024)
        self.assertEqual((x0, x1), (0, 185))
        self.assertEqual((y0, y1), (0, 60))

    def test_ranges_scale_with_image_size(self):
        self.assertEqual(DatagenConfig(image_size=1024, patch_size=16).region_ranges(), (50, 350, 50, 350))
        self.assertEqual(DatagenConfig(image_size=64, patch_size=8).region_ranges(), (3, 22, 3, 22))


class InpaintTests(SimpleTestCase):
    def setUp(self):
        self.image, self.fg_mask = datagen.generate_normal(scene(5), VOCAB)
        self.region = RegionR(x=16, y=16, w=10, h=8)

    def test_forced_fail_and_zero_amplitude_are_identity(self):
        for amplitude, forced in ((0.5, True), (0.0, False)):
            out = datagen.inpaint_defect(
                self.image, self.fg_mask, self.region, "scratch", amplitude, forced, np.random.default_rng(0)
            )
            np.testing.assert_array_equal(out, self.image)

    def test_outside_region_unchanged(self):
        for tag in ("scratch", "discolored", "moldy spots", "dent", "wrinkled"):
            out = datagen.inpaint_defect(self.image, self.fg_mask, self.region, tag, 0.9, False, np.random.default_rng(1))
            x0, y0, x1, y1 = self.region.box(32, 32)
            outside = np.ones((32, 32), dtype=bool)
            outside[y0:y1 + 1, x0:x1 + 1] = False
            np.testing.assert_array_equal(out[:, outside], self.image[:, outside])
            self.assertFalse(np.array_equal(out, self.image), tag)

    def test_distance_grows_with_amplitude(self):
        extractor = datagen.RawPixelExtractor(4)
        distances = []
        for amplitude in np.linspace(0.1, 0.9, 10):
            out = datagen.inpaint_defect(
                self.image, self.fg_mask, self.region, "dent", amplitude, False, np.random.default_rng(2)
            )
            distances.append(float(datagen.feature_distance_map(extractor, self.image, out).max()))
        for lower, higher in zip(distances, distances[1:]):
            self.assertGreaterEqual(higher, lower - 1e-12)


class FilterTests(SimpleTestCase):
    def test_cosine_distance_range(self):
        f = np.array([[[1.0, 2.0]], [[1.0, 0.0]], [[0.0, 0.0]], [[0.0, 0.0]]])
        f_a = np.array([[[-1.0, -2.0]], [[0.0, 3.0]], [[0.0, 0.0]], [[1.0, 0.0]]])
        np.testing.assert_allclose(datagen.cosine_distance(f, f_a)[:, 0], [2.0, 1.0, 0.0, 1.0], atol=1e-15)

    def test_identical_images_are_rejected(self):
        image, _ = datagen.generate_normal(scene(6), VOCAB)
        m_d = datagen.feature_distance_map(datagen.RawPixelExtractor(4), image, image.copy())
        self.assertEqual(m_d.shape, (8, 8))
        np.testing.assert_allclose(m_d, 0.0, atol=1e-12)
        accepted, distance, mask = datagen.filter_and_mask(m_d, 0.3, 32, 32)
        self.assertFalse(accepted)
        self.assertLess(distance, 1e-12)
        self.assertFalse(mask.any())

    def test_single_cell_above_threshold(self):
        m_d = np.zeros((4, 4))
        m_d[1, 2] = 0.9
        accepted, distance, mask = datagen.filter_and_mask(m_d, 0.3, 32, 32)
        self.assertTrue(accepted)
        self.assertEqual(distance, 0.9)
        self.assertEqual(mask.sum(), 64)
        self.assertTrue(mask[8:16, 16:24].all())

    def test_region_cells(self):
        cells = datagen.region_cells(RegionR(x=5, y=5, w=2, h=2), (8, 8), 32, 32)
        # box 4..6 touches cell row/col 1 only
        self.assertEqual(cells.sum(), 16)
        self.assertTrue(cells[4:8, 4:8].all())

    def test_distance_outside_the_region_is_rejected(self):
        m_d = np.zeros((8, 8))
        m_d[7, 7] = 0.9
        accepted, distance, mask = datagen.region_mask(m_d, 0.3, RegionR(x=5, y=5, w=2, h=2), 32, 32)
        self.assertFalse(accepted)
        self.assertEqual(distance, 0.9)
        self.assertFalse(mask.any())

        m_d[1, 1] = 0.5
        accepted, _, mask = datagen.region_mask(m_d, 0.3, RegionR(x=5, y=5, w=2, h=2), 32, 32)
        self.assertTrue(accepted)
        self.assertEqual(mask.sum(), 16)


class SampleTests(SimpleTestCase):
    def test_deterministic_in_seed_and_index(self):
        cfg = raw_config()
        extractor = datagen.make_extractor(cfg)
        objects = VOCAB.objects[:3]
        first = datagen.generate_sample(4, 11, cfg, VOCAB, objects, extractor)
        second = datagen.generate_sample(4, 11, cfg, VOCAB, objects, extractor)
        np.testing.assert_array_equal(first.anomalous_image, second.anomalous_image)
        self.assertEqual(first.meta_record(), second.meta_record())

    def test_mask_confined_to_region_cells(self):
        cfg = raw_config(forced_fail=0.0)
        extractor = datagen.make_extractor(cfg)
        for index in range(20):
            sample = datagen.generate_sample(index, 3, cfg, VOCAB, VOCAB.objects[:4], extractor)
            cells = datagen.region_cells(sample.region, (8, 8), 32, 32)
            self.assertFalse((sample.mask & ~cells).any())
            self.assertTrue(sample.fg_mask[sample.region.y, sample.region.x])

    def test_accepted_samples_always_have_a_mask(self):
        class CornerExtractor:
            """Features change only in the top-left cell, wherever the defect is"""

            def __init__(self):
                self.calls = 0

            def features(self, image):
                features = np.ones((8, 8, 3))
                if self.calls % 2:
                    features[0, 0] = (1.0, -1.0, 0.0)
                self.calls += 1
                return features

        cfg = raw_config(forced_fail=0.0)
        rejected = 0
        for index in range(20):
            sample = datagen.generate_sample(index, 5, cfg, VOCAB, VOCAB.objects[:4], CornerExtractor())
            self.assertGreater(sample.distance_score, cfg.threshold)
            corner = datagen.region_cells(sample.region, (8, 8), 32, 32)[0, 0]
            self.assertEqual(sample.accepted, bool(corner))
            self.assertEqual(sample.mask.any(), bool(corner))
            rejected += not sample.accepted
        self.assertGreater(rejected, 0)

    def test_forced_fail_samples_are_rejected(self):
        cfg = raw_config(forced_fail=0.3, threshold=0.3)
        extractor = datagen.make_extractor(cfg)
        forced = 0
        for index in range(60):
            sample = datagen.generate_sample(index, 8, cfg, VOCAB, VOCAB.objects[:4], extractor)
            if sample.metadata["forced_fail"]:
                forced += 1
                self.assertFalse(sample.accepted)
                self.assertLess(sample.distance_score, 1e-12)
            else:
                self.assertEqual(sample.accepted, sample.distance_score > 0.3)
        self.assertGreater(forced, 0)

    def test_without_filtering_everything_is_accepted(self):
        cfg = raw_config(forced_fail=1.0, filtering=False)
        sample = datagen.generate_sample(0, 1, cfg, VOCAB, VOCAB.objects[:2], datagen.make_extractor(cfg))
        self.assertTrue(sample.accepted)
        self.assertFalse(sample.mask.any())

    def test_backbone_extractor_needs_a_backbone(self):
        with self.assertRaises(ConfigurationError):
            datagen.make_extractor(raw_config(extractor="backbone"))


class GenerateDatasetTests(SimpleTestCase):
    def generate(self, out_dir, workers=1, **overrides):
        cfg = raw_config(**overrides)
        return datagen.generate_dataset(
            6, VOCAB, VOCAB.objects[:3], cfg, Path(out_dir), master_seed=21,
            extractor=datagen.make_extractor(cfg), workers=workers, held_out_objects=VOCAB.objects[3:5],
        )

    def test_layout_and_stats(self):
        with tempfile.TemporaryDirectory() as tmp:
            stats = self.generate(tmp)
            self.assertEqual(stats.accepted, 6)
            root = Path(tmp)
            for sub in ("normal", "anomalous", "mask"):
                self.assertEqual(len(list((root / sub).glob("*.png"))), 6)
            dataset = TripletDataset(root)
            self.assertEqual(len(dataset.records), stats.attempts)
            self.assertEqual(len(dataset), 6)
            self.assertEqual(dataset.stats["accepted"], 6)
            self.assertEqual(dataset.stats["held_out_objects"], sorted(VOCAB.objects[3:5]))
            record = dataset.accepted[0]
            self.assertEqual(
                set(record), {"id", "object", "texture", "anomaly", "region", "D", "accepted", "forced_fail", "seed", "amplitude"}
            )
            self.assertTrue((root / "normal" / f"{record['id']:06d}.png").exists())
            triplet = dataset.triplet(0)
            self.assertEqual(triplet.normal.shape, (3, 32, 32))
            self.assertEqual(triplet.mask.dtype, bool)

    def test_worker_count_does_not_change_bytes(self):
        with tempfile.TemporaryDirectory() as one, tempfile.TemporaryDirectory() as three:
            self.generate(one, workers=1)
            self.generate(three, workers=3)
            self.assertEqual(tree_digest(Path(one)), tree_digest(Path(three)))

    def test_hopeless_threshold_is_a_configuration_error(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(ConfigurationError):
                self.generate(tmp, forced_fail=1.0)

    def test_overlapping_splits_leak(self):
        cfg = raw_config()
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(LeakageError):
                datagen.generate_dataset(
                    2, VOCAB, VOCAB.objects[:3], cfg, Path(tmp), master_seed=0,
                    extractor=datagen.make_extractor(cfg), held_out_objects=VOCAB.objects[2:4],
                )
