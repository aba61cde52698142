"""Checkpoint binary format: round trips and corruption handling."""

import struct

import numpy as np
import pytest

from marnet.checkpoint import (
    MAGIC,
    BadMagicError,
    Checkpoint,
    CheckpointError,
    DuplicateNameError,
    TrainState,
    TruncatedError,
    UnsupportedVersionError,
    checkpoint_from_bytes,
    checkpoint_to_bytes,
    load_checkpoint,
    save_checkpoint,
)


def _sample_checkpoint(with_state=True):
    rng = np.random.default_rng(0)
    params = {
        "enc.w": rng.standard_normal((3, 4, 5)).astype(np.float32),
        "enc.b": rng.standard_normal(20).astype(np.float32),
        "head.w": np.array(-0.0, dtype=np.float32),  # rank-0, signed zero
    }
    state = None
    if with_state:
        state = TrainState(
            epoch=7,
            step=123,
            buffers={"bn.mean": rng.standard_normal(8).astype(np.float32)},
            first_moments={k: np.zeros_like(v) for k, v in params.items()},
            second_moments={k: np.ones_like(v) for k, v in params.items()},
        )
    config = {"kind": "classifier", "n_classes": 4, "depth": 3, "lr": 0.001}
    return Checkpoint(config=config, params=params, state=state)


class TestRoundTrip:
    def test_bytes_round_trip_exact(self):
        ckpt = _sample_checkpoint()
        blob = checkpoint_to_bytes(ckpt)
        back = checkpoint_from_bytes(blob)
        assert checkpoint_to_bytes(back) == blob

    def test_values_and_shapes_preserved(self):
        ckpt = _sample_checkpoint()
        back = checkpoint_from_bytes(checkpoint_to_bytes(ckpt))
        for name, arr in ckpt.params.items():
            assert back.params[name].shape == arr.shape
            np.testing.assert_array_equal(back.params[name], arr)
        # bit pattern preserved, including the sign of zero
        assert np.signbit(back.params["head.w"])
        assert back.state.epoch == 7 and back.state.step == 123

    def test_file_round_trip(self, tmp_path):
        path = str(tmp_path / "model.marc")
        ckpt = _sample_checkpoint()
        save_checkpoint(path, ckpt)
        again = str(tmp_path / "model2.marc")
        save_checkpoint(again, load_checkpoint(path))
        assert open(path, "rb").read() == open(again, "rb").read()

    def test_stateless_checkpoint(self):
        ckpt = _sample_checkpoint(with_state=False)
        back = checkpoint_from_bytes(checkpoint_to_bytes(ckpt))
        assert back.state is None

    def test_float64_params_stored_as_float32(self):
        ckpt = Checkpoint(config={}, params={"w": np.array([1.0, 2.0], dtype=np.float64)})
        back = checkpoint_from_bytes(checkpoint_to_bytes(ckpt))
        assert back.params["w"].dtype == np.float32

    def test_config_survives(self):
        ckpt = _sample_checkpoint()
        back = checkpoint_from_bytes(checkpoint_to_bytes(ckpt))
        assert back.config == ckpt.config

    def test_entry_order_preserved(self):
        ckpt = _sample_checkpoint()
        back = checkpoint_from_bytes(checkpoint_to_bytes(ckpt))
        assert list(back.params) == list(ckpt.params)


class TestCorruption:
    def test_bad_magic(self):
        blob = checkpoint_to_bytes(_sample_checkpoint())
        with pytest.raises(BadMagicError):
            checkpoint_from_bytes(b"XXXX" + blob[4:])

    def test_unsupported_version(self):
        blob = checkpoint_to_bytes(_sample_checkpoint())
        bad = MAGIC + struct.pack("<I", 99) + blob[8:]
        with pytest.raises(UnsupportedVersionError):
            checkpoint_from_bytes(bad)

    @pytest.mark.parametrize("keep", [3, 7, 20, 60, 200])
    def test_truncation_at_many_offsets(self, keep):
        blob = checkpoint_to_bytes(_sample_checkpoint())
        assert keep < len(blob)
        with pytest.raises(TruncatedError):
            checkpoint_from_bytes(blob[:keep])

    def test_truncated_one_byte_short(self):
        blob = checkpoint_to_bytes(_sample_checkpoint())
        with pytest.raises(TruncatedError):
            checkpoint_from_bytes(blob[:-1])

    def test_trailing_garbage_rejected(self):
        blob = checkpoint_to_bytes(_sample_checkpoint())
        with pytest.raises(CheckpointError, match="trailing"):
            checkpoint_from_bytes(blob + b"\x00")

    def test_duplicate_name_on_load(self):
        # Hand-build a weights block with the same name twice.
        entry = (
            struct.pack("<H", 1) + b"w" + struct.pack("<B", 1)
            + struct.pack("<Q", 1) + struct.pack("<f", 1.0)
        )
        config = b"{}"
        blob = (
            MAGIC
            + struct.pack("<I", 1)
            + struct.pack("<Q", len(config))
            + config
            + struct.pack("<Q", 2)
            + entry
            + entry
            + struct.pack("<B", 0)
        )
        with pytest.raises(DuplicateNameError):
            checkpoint_from_bytes(blob)

    def test_bad_config_json(self):
        config = b"{not json"
        blob = (
            MAGIC
            + struct.pack("<I", 1)
            + struct.pack("<Q", len(config))
            + config
            + struct.pack("<Q", 0)
            + struct.pack("<B", 0)
        )
        with pytest.raises(CheckpointError, match="config"):
            checkpoint_from_bytes(blob)
