import struct

import pytest
import torch

from scenesynth.checkpoint import (
    MAGIC,
    CheckpointError,
    load_checkpoint,
    load_module,
    load_optimizer,
    module_tensors,
    optimizer_tensors,
    restore_rng,
    save_checkpoint,
)


def test_roundtrip_bit_exact(tmp_path):
    torch.manual_seed(0)
    tensors = {
        "a/weight": torch.randn(3, 4),
        "a/bias": torch.randn(4, dtype=torch.float64),
        "b/count": torch.tensor([5, 7], dtype=torch.int64),
        "b/flag": torch.tensor([True, False]),
        "c/bytes": torch.randint(0, 255, (6,), dtype=torch.uint8),
    }
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, tensors, "k=v\n")
    back, cfg, rng = load_checkpoint(path)
    assert cfg == "k=v\n"
    assert set(back) == set(tensors)
    for name in tensors:
        assert back[name].dtype == tensors[name].dtype
        assert torch.equal(back[name], tensors[name])


def test_save_is_byte_deterministic(tmp_path):
    torch.manual_seed(1)
    tensors = {"x": torch.randn(5, 5), "y": torch.randn(2)}
    rng = bytes(torch.get_rng_state().numpy().tobytes())
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, tensors, "cfg", rng_state=rng)
    save_checkpoint(p2, dict(reversed(list(tensors.items()))), "cfg", rng_state=rng)
    assert p1.read_bytes() == p2.read_bytes()


def test_corrupt_header_errors(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_bytes(MAGIC + struct.pack("<I", 999) + b"\x00" * 8)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_bytes(MAGIC)  # truncated
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_module_roundtrip(tmp_path):
    torch.manual_seed(2)
    net = torch.nn.Sequential(torch.nn.Linear(3, 4), torch.nn.BatchNorm1d(4))
    net(torch.randn(8, 3))  # move running stats off init
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, module_tensors(net, "net"), "")
    net2 = torch.nn.Sequential(torch.nn.Linear(3, 4), torch.nn.BatchNorm1d(4))
    tensors, _, _ = load_checkpoint(path)
    load_module(net2, tensors, "net")
    for (k1, v1), (k2, v2) in zip(net.state_dict().items(), net2.state_dict().items()):
        assert k1 == k2
        assert torch.equal(v1, v2)
    with pytest.raises(CheckpointError):
        load_module(torch.nn.Linear(5, 5), tensors, "net")


def test_optimizer_roundtrip(tmp_path):
    torch.manual_seed(3)
    net = torch.nn.Linear(3, 2)
    opt = torch.optim.Adam(net.parameters(), lr=1e-3)
    for _ in range(3):
        loss = net(torch.randn(4, 3)).square().mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    path = tmp_path / "o.ckpt"
    save_checkpoint(path, optimizer_tensors(opt, "opt"), "")

    net2 = torch.nn.Linear(3, 2)
    net2.load_state_dict(net.state_dict())
    opt2 = torch.optim.Adam(net2.parameters(), lr=1e-3)
    tensors, _, _ = load_checkpoint(path)
    load_optimizer(opt2, tensors, "opt")
    s1 = opt.state_dict()["state"]
    s2 = opt2.state_dict()["state"]
    assert set(s1) == set(s2)
    for pid in s1:
        for key in s1[pid]:
            v1, v2 = s1[pid][key], s2[pid][key]
            if isinstance(v1, torch.Tensor):
                assert torch.allclose(v1.float(), v2.float())


def test_rng_state_roundtrip(tmp_path):
    torch.manual_seed(4)
    torch.randn(3)
    rng = bytes(torch.get_rng_state().numpy().tobytes())
    expected = torch.randn(5)
    path = tmp_path / "r.ckpt"
    save_checkpoint(path, {}, "", rng_state=rng)
    _, _, rng_back = load_checkpoint(path)
    restore_rng(rng_back)
    assert torch.equal(torch.randn(5), expected)
