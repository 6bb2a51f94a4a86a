import numpy as np
import pytest

from rfad.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from rfad.data import Dataset, apply_preprocessing, zca_fit
from rfad.distill import DistillConfig, distill_step, init_coreset
from rfad.errors import BadMagicError, TruncatedFileError, VersionMismatchError
from rfad.networks import sample_ensemble
from rfad.optim import OptimizerState
from rfad.utils import one_hot_centered


def small_coreset(rho=0.0, zca=False):
    rng = np.random.default_rng(0)
    ds = Dataset(rng.standard_normal((30, 1, 3, 3)).astype(np.float32), np.arange(30) % 3, 3)
    if zca:
        ds = apply_preprocessing(ds, zca_fit(ds))
    cfg = DistillConfig(architecture="fc", channels=16, img_per_class=2, rho=rho, batch_size=10, val_size=5)
    cs = init_coreset(ds, cfg)
    distill_step(cs, (ds.images[:10], one_hot_centered(ds.labels[:10], 3)), sample_ensemble(cs.network_spec, 2, 0),
                 OptimizerState(), cfg)
    return cs


@pytest.mark.parametrize("rho,zca", [(0.0, False), (0.5, False), (0.9, True)])
def test_round_trip_bit_exact(tmp_path, rho, zca):
    cs = small_coreset(rho, zca)
    save_checkpoint(tmp_path / "c.ckpt", cs, "abc", {"history": [1, 2]})
    back, header = load_checkpoint(tmp_path / "c.ckpt")
    for name in ("base_images", "transform", "labels", "mask", "frozen_values", "class_ids"):
        assert getattr(back, name).tobytes() == getattr(cs, name).tobytes(), name
    assert back.log_tau == cs.log_tau and back.network_spec == cs.network_spec
    assert header["config_hash"] == "abc" and header["metadata"] == {"history": [1, 2]}
    assert encode_checkpoint(back, "abc") == encode_checkpoint(cs, "abc")
    if zca:
        assert back.whiten.W.tobytes() == cs.whiten.W.tobytes()


def test_header_layout():
    raw = encode_checkpoint(small_coreset())
    assert raw[:8] == b"RFADCKPT" and int.from_bytes(raw[8:12], "little") == 1


def test_version_mismatch():
    raw = bytearray(encode_checkpoint(small_coreset()))
    raw[8:12] = (2).to_bytes(4, "little")
    with pytest.raises(VersionMismatchError):
        decode_checkpoint(bytes(raw))


def test_bad_magic_and_truncation():
    raw = encode_checkpoint(small_coreset())
    with pytest.raises(BadMagicError):
        decode_checkpoint(b"NOTACKPT" + raw[8:])
    with pytest.raises(TruncatedFileError):
        decode_checkpoint(raw[:-8])
