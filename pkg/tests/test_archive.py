import json
import struct

import numpy as np
import pytest

from bgadapt import archive
from bgadapt import tensor as T
from bgadapt.segnet import ModelConfig, SegmentationModel


@pytest.fixture
def model():
    m = SegmentationModel.create(4, seed=2, config=ModelConfig(enc_widths=(4, 6), feat_width=5, head_width=7))
    m.add_step_head(1, seed=3)
    for i, p in enumerate(m.parameters()):
        p.data += np.float32(0.01 * (i + 1))  # make every head non-trivial
    return m


def test_roundtrip_is_exact(model, tmp_path):
    path = tmp_path / "m.ckpt"
    archive.save(model, path, {"step_index": 2})
    back, meta = archive.load(path)
    assert meta == {"step_index": 2}
    assert back.class_counts == model.class_counts and back.config == model.config
    a, b = model.state_dict(), back.state_dict()
    assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
    x = T.tensor(np.random.default_rng(0).uniform(size=(3, 16, 16)))
    assert np.array_equal(model.forward(x).class_logits[1].data, back.forward(x).class_logits[1].data)


def test_flags_survive(model):
    model.background_mode, model.use_filter = "shared", False
    back, _ = archive.loads(archive.dumps(model))
    assert back.background_mode == "shared" and back.use_filter is False


def test_dumps_is_deterministic(model):
    assert archive.dumps(model, {"a": 1}) == archive.dumps(model, {"a": 1})


def test_flipped_payload_byte(model):
    raw = bytearray(archive.dumps(model))
    raw[-3] ^= 0xFF
    with pytest.raises(archive.ArchiveError, match="checksum"):
        archive.loads(bytes(raw))


@pytest.mark.parametrize("cut", [0, 5, 20, -1])
def test_truncated(model, cut):
    raw = archive.dumps(model)
    with pytest.raises(archive.ArchiveError):
        archive.loads(raw[:cut])


def test_bad_magic_and_version(model):
    raw = archive.dumps(model)
    with pytest.raises(archive.ArchiveError):
        archive.loads(b"XXXX" + raw[4:])
    with pytest.raises(archive.ArchiveError, match="version"):
        archive.loads(raw[:4] + struct.pack("<I", 99) + raw[8:])


def test_header_lies_about_architecture(model):
    raw = archive.dumps(model)
    hlen = struct.unpack_from("<I", raw, 8)[0]
    header = json.loads(raw[12 : 12 + hlen])
    header["class_counts"] = [4, 2]
    head = json.dumps(header).encode()
    with pytest.raises(archive.ArchiveError):
        archive.loads(raw[:8] + struct.pack("<I", len(head)) + head + raw[12 + hlen :])


def test_missing_file(tmp_path):
    with pytest.raises(archive.ArchiveError):
        archive.load(tmp_path / "absent.ckpt")
