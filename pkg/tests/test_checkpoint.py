import struct

import pytest
import torch

from steeradapt.checkpoint import MAGIC, CheckpointError, decode, encode
from steeradapt.training import load_checkpoint, run_phase1, save_checkpoint


@pytest.fixture(scope="module")
def trained(tiny_synth):
    state, _ = run_phase1(tiny_synth.source, iterations=3, batch_size=8, seed=1, log_every=1)
    state.config_digest = "abc123"
    return state


def test_save_load_save_is_byte_identical(trained, tmp_path):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(trained, a)
    save_checkpoint(load_checkpoint(a), b)
    assert a.read_bytes() == b.read_bytes()


def test_roundtrip_preserves_parameters_and_outputs(trained, tiny_synth, tmp_path):
    save_checkpoint(trained, tmp_path / "c.ckpt")
    back = load_checkpoint(tmp_path / "c.ckpt")
    assert back.digests() == trained.digests()
    assert (back.phase, back.iteration, back.seed) == (trained.phase, trained.iteration, trained.seed)
    x = torch.from_numpy(tiny_synth.source_test.images()[:4])
    net, net2 = trained.nets["regressor"], back.nets["regressor"]
    assert torch.equal(net.eval(x), net2.eval(x))


def test_resumed_training_matches_uninterrupted(tiny_synth, tmp_path):
    full, _ = run_phase1(tiny_synth.source, iterations=4, batch_size=8, seed=2, log_every=1)
    half, _ = run_phase1(tiny_synth.source, iterations=2, batch_size=8, seed=2, log_every=1)
    save_checkpoint(half, tmp_path / "h.ckpt")
    resumed, _ = run_phase1(tiny_synth.source, iterations=4, batch_size=8, seed=2, log_every=1,
                            state=load_checkpoint(tmp_path / "h.ckpt"))
    assert resumed.digests() == full.digests()


def test_wrong_magic_rejected(trained, tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(trained, p)
    p.write_bytes(b"XXXX" + p.read_bytes()[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(p)


def test_future_version_rejected():
    raw = bytearray(encode("d", {}, {}))
    raw[4:6] = struct.pack("<H", 99)
    with pytest.raises(CheckpointError, match="version"):
        decode(bytes(raw))


def test_truncated_rejected(trained, tmp_path):
    p = tmp_path / "t.ckpt"
    save_checkpoint(trained, p)
    data = p.read_bytes()
    for cut in (3, 20, len(data) // 2, len(data) - 1):
        p.write_bytes(data[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(p)


def test_digest_mismatch_rejected(trained, tmp_path):
    p = tmp_path / "d.ckpt"
    save_checkpoint(trained, p)
    assert load_checkpoint(p, expect_digest="abc123").config_digest == "abc123"
    with pytest.raises(CheckpointError, match="digest"):
        load_checkpoint(p, expect_digest="zzz")


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "none.ckpt")


def test_header_starts_with_magic(trained, tmp_path):
    save_checkpoint(trained, tmp_path / "x.ckpt")
    assert (tmp_path / "x.ckpt").read_bytes()[:4] == MAGIC
