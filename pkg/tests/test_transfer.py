import json
import struct

import numpy as np
import pytest

from ctcx import (
    CHECKPOINT_MAGIC,
    CheckpointError,
    ModelConfig,
    TransferError,
    TransferVerificationError,
    checkpoint_from_params,
    forward,
    init_params,
    load_checkpoint,
    named_tensors,
    read_checkpoint,
    recurrent_hidden_outputs,
    save_checkpoint,
    transfer_weights,
    verify_transfer,
)


def small_cfg(**kw):
    base = dict(feature_dim=5, num_classes=7, hidden=6, num_layers=2, bidirectional=False)
    base.update(kw)
    return ModelConfig(**base)


def checkpoint_for(cfg, alphabet, path, seed=0):
    params = init_params(ModelConfig(**{**cfg.__dict__, "seed": seed}))
    save_checkpoint(params, cfg, alphabet, path)
    return params


class TestCheckpointRoundTrip:
    @pytest.mark.parametrize("bidirectional", [False, True])
    def test_params_survive_bit_exact(self, tmp_path, ru, bidirectional):
        cfg = small_cfg(num_classes=ru.num_classes, bidirectional=bidirectional, seed=3)
        params = init_params(cfg)
        path = tmp_path / "model.ckpt"
        save_checkpoint(params, cfg, ru, path)
        loaded, loaded_cfg, name = load_checkpoint(path)
        assert loaded_cfg == ModelConfig(
            feature_dim=cfg.feature_dim,
            num_classes=cfg.num_classes,
            hidden=cfg.hidden,
            num_layers=cfg.num_layers,
            bidirectional=cfg.bidirectional,
        )
        assert name == "ru"
        for (n1, a), (n2, b) in zip(named_tensors(params), named_tensors(loaded)):
            assert n1 == n2
            np.testing.assert_array_equal(a, b, err_msg=n1)

    def test_alphabet_symbols_embedded(self, tmp_path, kk):
        cfg = small_cfg(num_classes=kk.num_classes)
        checkpoint_for(cfg, kk, tmp_path / "m.ckpt")
        ckpt = read_checkpoint(tmp_path / "m.ckpt")
        assert ckpt.alphabet_symbols == "".join(kk.symbols)
        assert ckpt.alphabet.symbols == kk.symbols

    def test_tensor_count_by_architecture(self, tmp_path, ru):
        for bidi, count in ((False, 8), (True, 14)):
            cfg = small_cfg(num_classes=ru.num_classes, bidirectional=bidi)
            path = tmp_path / f"m{bidi}.ckpt"
            checkpoint_for(cfg, ru, path)
            assert len(read_checkpoint(path).tensors) == count

    def test_file_starts_with_magic_and_version(self, tmp_path, ru):
        cfg = small_cfg(num_classes=ru.num_classes)
        checkpoint_for(cfg, ru, tmp_path / "m.ckpt")
        raw = (tmp_path / "m.ckpt").read_bytes()
        assert raw[:4] == CHECKPOINT_MAGIC == b"CTCX"
        version, header_len = struct.unpack_from("<II", raw, 4)
        assert version == 1
        header = json.loads(raw[12 : 12 + header_len])
        assert header["alphabet_name"] == "ru"
        # payload starts on a 64-byte boundary
        assert (12 + header_len + (-(12 + header_len)) % 64) % 64 == 0


class TestCheckpointErrors:
    def write_valid(self, tmp_path, ru):
        cfg = small_cfg(num_classes=ru.num_classes)
        path = tmp_path / "m.ckpt"
        checkpoint_for(cfg, ru, path)
        return path, cfg

    def test_bad_magic(self, tmp_path, ru):
        path, _ = self.write_valid(tmp_path, ru)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="bad magic"):
            read_checkpoint(path)

    def test_unsupported_version(self, tmp_path, ru):
        path, _ = self.write_valid(tmp_path, ru)
        raw = bytearray(path.read_bytes())
        struct.pack_into("<I", raw, 4, 99)
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="unsupported version 99"):
            read_checkpoint(path)

    def test_truncated_header(self, tmp_path, ru):
        path, _ = self.write_valid(tmp_path, ru)
        path.write_bytes(path.read_bytes()[:8])
        with pytest.raises(CheckpointError, match="truncated header"):
            read_checkpoint(path)

    def test_unreadable_header(self, tmp_path, ru):
        path, _ = self.write_valid(tmp_path, ru)
        raw = bytearray(path.read_bytes())
        raw[12] = 0xFF  # corrupt the JSON
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="unreadable header"):
            read_checkpoint(path)

    def test_truncated_payload_names_tensor(self, tmp_path, ru):
        path, _ = self.write_valid(tmp_path, ru)
        path.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(CheckpointError, match="truncated payload for tensor dense.b"):
            read_checkpoint(path)

    def test_shape_mismatch_names_tensor(self, tmp_path, ru):
        path, _ = self.write_valid(tmp_path, ru)
        raw = path.read_bytes()
        _, header_len = struct.unpack_from("<II", raw, 4)
        header = json.loads(raw[12 : 12 + header_len])
        header["tensors"][0]["shape"] = [1, 1]
        blob = json.dumps(header, ensure_ascii=False).encode("utf-8")
        prefix = raw[:8] + blob
        # keep byte layout valid: re-pack with the new header length
        prefix = raw[:4] + struct.pack("<II", 1, len(blob)) + blob
        payload_start = 12 + header_len + (-(12 + header_len)) % 64
        pad = (-len(prefix)) % 64
        path.write_bytes(prefix + b"\0" * pad + raw[payload_start:])
        with pytest.raises(CheckpointError, match="layer1.fwd.w_input"):
            read_checkpoint(path)

    def test_expect_config_mismatch_names_tensor(self, tmp_path, ru):
        path, cfg = self.write_valid(tmp_path, ru)
        other = small_cfg(num_classes=ru.num_classes, hidden=12)
        with pytest.raises(CheckpointError, match="layer1.fwd.w_input"):
            load_checkpoint(path, expect=other)

    def test_expect_matching_config_passes(self, tmp_path, ru):
        path, cfg = self.write_valid(tmp_path, ru)
        load_checkpoint(path, expect=cfg)


class TestTransferWeights:
    def setup_pair(self, ru, kk, bidirectional=False, hidden=6):
        src_cfg = small_cfg(
            num_classes=ru.num_classes, bidirectional=bidirectional, hidden=hidden, seed=1
        )
        tgt_cfg = small_cfg(
            num_classes=kk.num_classes, bidirectional=bidirectional, hidden=hidden
        )
        src_params = init_params(src_cfg)
        ckpt = checkpoint_from_params(src_params, src_cfg, ru)
        return src_params, ckpt, tgt_cfg

    def test_recurrent_tensors_copied_verbatim(self, ru, kk):
        src_params, ckpt, tgt_cfg = self.setup_pair(ru, kk, bidirectional=True)
        params, report = transfer_weights(ckpt, tgt_cfg, kk, seed=5)
        assert len(report.copied) == 12
        src = dict(named_tensors(src_params))
        tgt = dict(named_tensors(params))
        for name in report.copied:
            np.testing.assert_array_equal(src[name], tgt[name], err_msg=name)

    def test_report_partitions_tensor_set(self, ru, kk):
        _, ckpt, tgt_cfg = self.setup_pair(ru, kk)
        params, report = transfer_weights(ckpt, tgt_cfg, kk, seed=5)
        all_names = {name for name, _ in named_tensors(params)}
        assert set(report.copied) | set(report.reinitialized) == all_names
        assert not set(report.copied) & set(report.reinitialized)
        assert set(report.skipped_reason) == {"dense.w", "dense.b"}
        assert "output dimension mismatch" in report.skipped_reason["dense.w"]
        assert str(ckpt.model_config.num_classes) in report.skipped_reason["dense.w"]

    def test_dense_head_matches_fresh_init_with_target_seed(self, ru, kk):
        _, ckpt, tgt_cfg = self.setup_pair(ru, kk)
        params, _ = transfer_weights(ckpt, tgt_cfg, kk, seed=11)
        fresh = init_params(ModelConfig(**{**tgt_cfg.__dict__, "seed": 11}))
        np.testing.assert_array_equal(params.dense_w, fresh.dense_w)
        np.testing.assert_array_equal(params.dense_b, fresh.dense_b)

    def test_source_dense_values_never_consulted(self, ru, kk):
        _, ckpt, tgt_cfg = self.setup_pair(ru, kk)
        baseline, _ = transfer_weights(ckpt, tgt_cfg, kk, seed=2)
        # scribble over the source head and transfer again
        mangled = [
            (n, np.full_like(a, 9.0) if n.startswith("dense") else a) for n, a in ckpt.tensors
        ]
        ckpt2 = type(ckpt)(
            ckpt.format_version, ckpt.model_config, ckpt.alphabet_name,
            ckpt.alphabet_symbols, mangled,
        )
        again, _ = transfer_weights(ckpt2, tgt_cfg, kk, seed=2)
        for (n1, a), (n2, b) in zip(named_tensors(baseline), named_tensors(again)):
            np.testing.assert_array_equal(a, b, err_msg=n1)

    @pytest.mark.parametrize(
        "field,value",
        [("hidden", 8), ("num_layers", 1), ("bidirectional", True), ("feature_dim", 4)],
    )
    def test_geometry_mismatch_rejected(self, ru, kk, field, value):
        _, ckpt, tgt_cfg = self.setup_pair(ru, kk)
        bad = ModelConfig(**{**tgt_cfg.__dict__, field: value})
        with pytest.raises(TransferError, match=field):
            transfer_weights(ckpt, bad, kk, seed=0)

    def test_alphabet_class_count_must_match_config(self, ru, kk):
        _, ckpt, tgt_cfg = self.setup_pair(ru, kk)
        with pytest.raises(TransferError, match="classes"):
            transfer_weights(ckpt, tgt_cfg, ru, seed=0)  # ru is 35 classes, cfg says 44

    def test_same_alphabet_transfer_preserves_hidden_activations(self, ru, rng):
        cfg = small_cfg(num_classes=ru.num_classes, seed=4)
        params = init_params(cfg)
        ckpt = checkpoint_from_params(params, cfg, ru)
        moved, _ = transfer_weights(ckpt, cfg, ru, seed=99)
        feats = rng.standard_normal((9, cfg.feature_dim))
        np.testing.assert_array_equal(
            recurrent_hidden_outputs(params, cfg, feats)[-1],
            recurrent_hidden_outputs(moved, cfg, feats)[-1],
        )


class TestVerifyTransfer:
    def build(self, ru, kk, bidirectional=False):
        src_cfg = small_cfg(num_classes=ru.num_classes, bidirectional=bidirectional, seed=1)
        src_params = init_params(src_cfg)
        ckpt = checkpoint_from_params(src_params, src_cfg, ru)
        tgt_cfg = small_cfg(num_classes=kk.num_classes, bidirectional=bidirectional)
        moved, _ = transfer_weights(ckpt, tgt_cfg, kk, seed=8)
        # reload the source through the f32 file format so both sides sit on
        # the same grid
        return init_params(src_cfg), moved, src_cfg

    @pytest.mark.parametrize("bidirectional", [False, True])
    def test_clean_transfer_has_zero_deviation(self, ru, kk, rng, bidirectional):
        src, moved, cfg = self.build(ru, kk, bidirectional)
        probes = [rng.standard_normal((7, cfg.feature_dim)) for _ in range(5)]
        report = verify_transfer(src, moved, cfg, probes)
        assert report.ok
        assert report.max_abs_deviation == 0.0
        assert report.first_divergence is None

    def test_perturbation_is_detected_and_located(self, ru, kk, rng):
        src, moved, cfg = self.build(ru, kk)
        moved.layers[1].fwd.w_recurrent[0, 0] += 1e-3
        probes = [rng.standard_normal((7, cfg.feature_dim))]
        with pytest.raises(TransferVerificationError, match="layer2"):
            verify_transfer(src, moved, cfg, probes)

    def test_post_training_mode_reports_without_raising(self, ru, kk, rng):
        src, moved, cfg = self.build(ru, kk)
        moved.layers[0].fwd.bias[0] += 0.5
        report = verify_transfer(
            src, moved, cfg, rng.standard_normal((7, cfg.feature_dim)), post_training=True
        )
        assert not report.ok
        assert report.max_abs_deviation > 0
        assert report.first_divergence == "layer1"
        assert report.to_dict()["ok"] is False

    def test_differing_dense_heads_are_ignored(self, ru, kk, rng):
        # the two models disagree on num_classes; only the stacks are compared
        src, moved, cfg = self.build(ru, kk)
        assert src.dense_b.shape != moved.dense_b.shape
        report = verify_transfer(src, moved, cfg, rng.standard_normal((6, cfg.feature_dim)))
        assert report.ok


class TestEndToEnd:
    def test_disk_round_trip_then_transfer(self, tmp_path, ru, kk, rng):
        cfg = small_cfg(num_classes=ru.num_classes, bidirectional=True, seed=6)
        params = init_params(cfg)
        path = tmp_path / "ru.ckpt"
        save_checkpoint(params, cfg, ru, path)
        ckpt = read_checkpoint(path)
        tgt_cfg = small_cfg(num_classes=kk.num_classes, bidirectional=True)
        moved, report = transfer_weights(ckpt, tgt_cfg, kk, seed=0)
        assert len(report.copied) == 12
        feats = rng.standard_normal((8, cfg.feature_dim))
        verify_transfer(params, moved, cfg, feats)
        # the transferred model runs end to end with the larger head
        logits, _ = forward(moved, tgt_cfg, feats, train_mode=False)
        assert logits.shape == (8, kk.num_classes)
