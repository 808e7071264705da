"""Synthetic benchmark generation and binary round trips."""

import struct

import numpy as np
import pytest

from camp.config import ConfigError, ModelConfig, SyntheticSpec
from camp.data import (
    FEATURE_MAGIC,
    Checkpoint,
    MagicError,
    PayloadError,
    TruncationError,
    VersionError,
    generate_synthetic,
    load_checkpoint,
    load_features,
    read_feature_file,
    save_checkpoint,
    save_dataset,
    write_feature_file,
)
from camp.params import CampParams, ParamError


def small_spec(**over):
    base = dict(
        n_pairs=12, val_pairs=4, test_pairs=4, n_concepts=10, regions_per_image=3,
        words_per_caption=5, raw_region_dim=32, vocab_size=24, noise_sigma=0.05, seed=7,
    )
    base.update(over)
    return SyntheticSpec(**base)


class TestGenerateSynthetic:
    def test_shapes_and_split_sizes(self):
        train, val, test = generate_synthetic(small_spec())
        assert (train.n_images, val.n_images, test.n_images) == (12, 4, 4)
        assert train.regions[0].shape == (32, 3)
        assert all(len(c) == 5 for c in train.captions)
        assert train.cap_to_img == list(range(12))

    def test_noiseless_regions_equal_prototypes(self):
        spec = small_spec(noise_sigma=0.0)
        train, _, _ = generate_synthetic(spec)
        protos = train.meta.prototypes
        for img, labels in zip(train.regions, train.meta.region_labels):
            for j, lab in enumerate(labels):
                assert lab >= 0
                np.testing.assert_array_equal(img[:, j], protos[lab])

    def test_same_seed_is_byte_identical(self):
        a_train, a_val, a_test = generate_synthetic(small_spec())
        b_train, b_val, b_test = generate_synthetic(small_spec())
        for a, b in ((a_train, b_train), (a_val, b_val), (a_test, b_test)):
            assert a.captions == b.captions
            for ra, rb in zip(a.regions, b.regions):
                assert ra.tobytes() == rb.tobytes()

    def test_different_seed_differs(self):
        a, _, _ = generate_synthetic(small_spec(seed=1))
        b, _, _ = generate_synthetic(small_spec(seed=2))
        assert a.captions != b.captions

    def test_nearest_prototype_recovers_concepts(self):
        spec = SyntheticSpec(
            n_pairs=100, val_pairs=0, test_pairs=0, n_concepts=20,
            regions_per_image=4, words_per_caption=6, noise_sigma=0.1, seed=0,
        )
        train, _, _ = generate_synthetic(spec)
        protos = train.meta.prototypes.astype(np.float64)
        correct = 0
        total = 0
        for img, labels in zip(train.regions, train.meta.region_labels):
            for j, lab in enumerate(labels):
                if lab < 0:
                    continue
                d = np.linalg.norm(protos - img[:, j].astype(np.float64), axis=1)
                correct += int(d.argmin() == lab)
                total += 1
        assert correct / total > 0.99

    def test_concept_sets_unique_across_all_splits(self):
        train, val, test = generate_synthetic(small_spec())
        sets = train.meta.concept_sets + val.meta.concept_sets + test.meta.concept_sets
        assert len(sets) == len(set(sets))

    def test_caption_tokens_identify_image(self):
        train, _, _ = generate_synthetic(small_spec())
        for caption, concepts in zip(train.captions, train.meta.concept_sets):
            concept_tokens = {c + 1 for c in concepts}
            assert concept_tokens <= set(caption)

    def test_distractors_marked(self):
        spec = small_spec(regions_per_image=4, distractor_rate=0.5)
        train, _, _ = generate_synthetic(spec)
        for labels in train.meta.region_labels:
            assert (labels == -1).sum() == 2

    def test_inconsistent_spec_rejected(self):
        with pytest.raises(ConfigError):
            small_spec(n_concepts=30, vocab_size=24)


class TestFeatureFile:
    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        arr = rng.normal(size=(7, 5)).astype(np.float32)
        path = tmp_path / "x.feat"
        write_feature_file(path, arr)
        back = read_feature_file(path)
        assert back.tobytes() == arr.tobytes()

    def test_dataset_round_trip_equal_tensors(self, tmp_path):
        train, _, _ = generate_synthetic(small_spec())
        save_dataset(train, tmp_path, "train")
        back = load_features(tmp_path / "train.manifest.json")
        assert back.captions == train.captions
        assert back.cap_to_img == train.cap_to_img
        assert back.vocab_size == train.vocab_size
        for a, b in zip(back.regions, train.regions):
            np.testing.assert_array_equal(a, b)

    def test_corrupt_magic(self, tmp_path):
        path = tmp_path / "bad.feat"
        write_feature_file(path, np.zeros((2, 3), dtype=np.float32))
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(MagicError, match="CAMPFEAT"):
            read_feature_file(path)

    def test_inflated_count_is_truncation(self, tmp_path):
        path = tmp_path / "bad.feat"
        write_feature_file(path, np.zeros((2, 3), dtype=np.float32))
        raw = bytearray(path.read_bytes())
        # count lives after magic (8) + version (2) + dim (4)
        count = struct.unpack_from("<I", raw, 14)[0]
        struct.pack_into("<I", raw, 14, count + 1)
        path.write_bytes(bytes(raw))
        with pytest.raises(TruncationError):
            read_feature_file(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "bad.feat"
        write_feature_file(path, np.zeros((2, 3), dtype=np.float32))
        raw = bytearray(path.read_bytes())
        struct.pack_into("<H", raw, 8, 99)
        path.write_bytes(bytes(raw))
        with pytest.raises(VersionError):
            read_feature_file(path)

    def test_nan_payload(self, tmp_path):
        path = tmp_path / "bad.feat"
        arr = np.zeros((2, 3), dtype=np.float32)
        arr[1, 1] = np.nan
        with open(path, "wb") as fh:
            fh.write(FEATURE_MAGIC)
            fh.write(struct.pack("<HII", 1, 3, 2))
            fh.write(arr.astype("<f4").tobytes())
        with pytest.raises(PayloadError):
            read_feature_file(path)


def tiny_cfg():
    return ModelConfig(d=6, d_h=3, embed_dim=4, vocab_size=12, raw_region_dim=8, max_words=4)


class TestCheckpoint:
    def test_save_load_save_identical_bytes(self, tmp_path):
        cfg = tiny_cfg()
        params = CampParams.init(cfg, np.random.default_rng(3))
        ckpt = Checkpoint(model_cfg=cfg, params=params.state_dict(), best_rsum=1.25, epoch=4)
        p1, p2 = tmp_path / "a.camp", tmp_path / "b.camp"
        save_checkpoint(ckpt, p1)
        save_checkpoint(load_checkpoint(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_parameters_bit_exact(self, tmp_path):
        cfg = tiny_cfg()
        params = CampParams.init(cfg, np.random.default_rng(4))
        path = tmp_path / "c.camp"
        save_checkpoint(Checkpoint(model_cfg=cfg, params=params.state_dict()), path)
        back = load_checkpoint(path)
        for name, arr in params.state_dict().items():
            assert back.params[name].tobytes() == arr.tobytes()

    def test_load_into_mismatched_model_names_offender(self, tmp_path):
        cfg = tiny_cfg()
        params = CampParams.init(cfg, np.random.default_rng(5))
        path = tmp_path / "d.camp"
        save_checkpoint(Checkpoint(model_cfg=cfg, params=params.state_dict()), path)
        other_cfg = ModelConfig(d=8, d_h=3, embed_dim=4, vocab_size=12,
                                raw_region_dim=8, max_words=4)
        other = CampParams.init(other_cfg, np.random.default_rng(6))
        with pytest.raises(ParamError, match="core.vis_proj|encoder.region_w"):
            other.load_state(load_checkpoint(path).params)

    def test_corrupt_magic(self, tmp_path):
        cfg = tiny_cfg()
        params = CampParams.init(cfg, np.random.default_rng(7))
        path = tmp_path / "e.camp"
        save_checkpoint(Checkpoint(model_cfg=cfg, params=params.state_dict()), path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"ZZZZ"
        path.write_bytes(bytes(raw))
        with pytest.raises(MagicError):
            load_checkpoint(path)

    def test_rng_and_optimizer_round_trip(self, tmp_path):
        cfg = tiny_cfg()
        params = CampParams.init(cfg, np.random.default_rng(8))
        rng = np.random.default_rng(123)
        rng.normal(size=10)  # advance
        opt = {
            "step": 3,
            "m": {k: np.full_like(v, 0.5) for k, v in params.state_dict().items()},
            "v": {k: np.full_like(v, 0.25) for k, v in params.state_dict().items()},
        }
        ckpt = Checkpoint(
            model_cfg=cfg, params=params.state_dict(), best_rsum=2.0, epoch=9,
            rng_state=rng.bit_generator.state, opt_state=opt,
        )
        path = tmp_path / "f.camp"
        save_checkpoint(ckpt, path)
        back = load_checkpoint(path)
        assert back.opt_state["step"] == 3
        assert back.epoch == 9
        restored = np.random.default_rng(0)
        restored.bit_generator.state = back.rng_state
        np.testing.assert_array_equal(restored.normal(size=5), rng.normal(size=5))
        for k, v in opt["m"].items():
            np.testing.assert_array_equal(back.opt_state["m"][k], v)
