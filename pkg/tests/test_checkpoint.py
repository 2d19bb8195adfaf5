import zipfile

import pytest
import torch

from htc_clip.checkpoint import FORMAT_VERSION, from_model, load_checkpoint, save_checkpoint
from htc_clip.config import TrainConfig
from htc_clip.corpus import build_vocab
from htc_clip.encoder import EncoderConfig
from htc_clip.errors import IncompatibleCheckpoint
from htc_clip.model import HTCCLIP
from htc_clip.taxonomy import parse_taxonomy

ENC = EncoderConfig(d_h=8, n_layers=1, n_heads=2, max_len=10, vocab_size=12, feedforward_dim=8)


@pytest.fixture
def saved(tmp_path, seven):
    vocab = build_vocab(["a b c d e f g"])
    model = HTCCLIP.build(TrainConfig(encoder=ENC, k=4, seed=3), seven)
    path = tmp_path / "m.htc"
    save_checkpoint(path, from_model(model, vocab, {"best_epoch": 2}))
    return path, model, vocab


def test_round_trip_is_bit_exact(saved, seven):
    path, model, vocab = saved
    ckpt = load_checkpoint(path)
    assert ckpt.config == model.cfg
    assert ckpt.vocab == vocab
    assert ckpt.hierarchy.same_structure(seven)
    assert ckpt.meta == {"best_epoch": 2}
    rebuilt = ckpt.build_model()
    for k, v in model.state_dict().items():
        assert torch.equal(rebuilt.state_dict()[k], v), k


def test_double_precision_round_trip(tmp_path, seven):
    model = HTCCLIP.build(TrainConfig(encoder=ENC, k=4), seven).double()
    save_checkpoint(tmp_path / "d.htc", from_model(model, build_vocab(["a"])))
    rebuilt = load_checkpoint(tmp_path / "d.htc").build_model()
    assert rebuilt.linear_head.proj.weight.dtype == torch.float64
    assert torch.equal(rebuilt.linear_head.proj.weight, model.linear_head.proj.weight)


def test_identical_weights_give_identical_bytes(tmp_path, saved):
    path, model, vocab = saved
    save_checkpoint(tmp_path / "again.htc", from_model(model, vocab, {"best_epoch": 2}))
    assert path.read_bytes() == (tmp_path / "again.htc").read_bytes()


def test_archive_declares_version_and_shapes(saved):
    path, _, _ = saved
    with zipfile.ZipFile(path) as zf:
        import json
        header = json.loads(zf.read("header.json"))
    assert header["format_version"] == FORMAT_VERSION
    assert header["arrays"]["linear_head.proj.weight"]["shape"] == [7, 8]
    assert "hier_head.pooled.1.weight" in header["arrays"]


def test_rejects_foreign_files(tmp_path):
    junk = tmp_path / "junk.htc"
    junk.write_bytes(b"not a zip")
    with pytest.raises(IncompatibleCheckpoint):
        load_checkpoint(junk)
    with zipfile.ZipFile(tmp_path / "empty.htc", "w") as zf:
        zf.writestr("x", "y")
    with pytest.raises(IncompatibleCheckpoint):
        load_checkpoint(tmp_path / "empty.htc")
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.htc")


def test_wrong_version_rejected(tmp_path):
    with zipfile.ZipFile(tmp_path / "v.htc", "w") as zf:
        zf.writestr("header.json", '{"format_version": "other/9"}')
    with pytest.raises(IncompatibleCheckpoint):
        load_checkpoint(tmp_path / "v.htc")


def test_compatibility_checks(saved, toy):
    path, _, vocab = saved
    ckpt = load_checkpoint(path)
    ckpt.check_compatible(ckpt.hierarchy, vocab)
    with pytest.raises(IncompatibleCheckpoint):
        ckpt.check_compatible(toy)
    with pytest.raises(IncompatibleCheckpoint):
        ckpt.check_compatible(vocab=build_vocab(["zz"]))
    ckpt.state.pop("linear_head.proj.bias")
    with pytest.raises(IncompatibleCheckpoint):
        ckpt.build_model()
