import numpy as np
import pytest
import torch

from attrcl.encoder import EncoderConfig, init_teacher
from attrcl.model import RetrievalModel, load_checkpoint, save_checkpoint


def _model(method="mclfir"):
    torch.manual_seed(0)
    m = RetrievalModel(method, EncoderConfig(32))
    for k, a in enumerate(["hue-color", "fill-length"]):
        if method == "er":
            if k == 0:
                m.registry.add_head("__shared__", m.head_config, seed=k)
        else:
            m.registry.add_head(a, m.head_config, seed=k)
        m.text_vector(a)
    if method == "mclfir":
        m.teacher = init_teacher(m.encoder, 0.99)
        m.teacher.step = 17
        m.registry.freeze("hue-color")
    return m


@pytest.mark.parametrize("method", ["mclfir", "er", "multihead_triplet"])
def test_checkpoint_round_trip(tmp_path, rng, method):
    m = _model(method)
    path = save_checkpoint(tmp_path / "c.npz", m, task_cursor=2)
    back, meta = load_checkpoint(path)
    assert meta["task_cursor"] == 2 and meta["method"] == method
    imgs = rng.random((3, 32, 32, 3)).astype(np.float32)
    for a in ["hue-color", "fill-length"]:
        np.testing.assert_array_equal(back.embed(imgs, a), m.embed(imgs, a))
    if method == "mclfir":
        assert back.teacher.step == 17
        assert back.registry.frozen == {"hue-color"}
        for k, v in m.teacher.state_dict().items():
            assert torch.equal(v, back.teacher.state_dict()[k])


def test_checkpoint_is_self_describing(tmp_path):
    path = save_checkpoint(tmp_path / "c.npz", _model())
    with np.load(path) as data:
        names = set(data.files)
        assert "meta" in names
        assert any(n.startswith("student/") for n in names)
        assert any(n.startswith("teacher/") for n in names)
        assert any(n.startswith("head1/") for n in names)


def test_bad_version(tmp_path):
    arrays = _model().to_arrays()
    arrays["meta"] = np.frombuffer(b'{"version": 99}', dtype=np.uint8)
    with pytest.raises(ValueError, match="version"):
        RetrievalModel.from_arrays(arrays)


def test_unknown_attribute_and_method():
    with pytest.raises(KeyError):
        _model().embed(np.zeros((1, 32, 32, 3)), "nope")
    with pytest.raises(ValueError):
        RetrievalModel("sgd")


def test_snapshot_is_independent():
    m = _model()
    snap = m.snapshot()
    with torch.no_grad():
        next(m.encoder.parameters()).add_(1.0)
    assert not torch.equal(next(m.encoder.parameters()), next(snap.encoder.parameters()))
