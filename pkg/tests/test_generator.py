import numpy as np
import pytest
import torch

from scenesynth.generator import (
    GenConfig,
    ImageGenerator,
    Layout,
    ShapePath,
    _resize_masks,
    up_block,
)
from scenesynth.text import CondAugment, LabelEmbeddings, TextEncoding, WordLabelEmbeddings


def _tiny_cfg(**kw):
    base = dict(
        base_channels=4, label_dim=6, cond_dim=8, noise_dim=5,
        num_classes=3, word_dim=6, base_resolution=8, residual_counts=(1, 1, 1),
    )
    base.update(kw)
    return GenConfig(**base)


def _inputs(cfg, t=2, ts=3, batch=1, dtype=torch.float32):
    torch.manual_seed(0)
    enc = TextEncoding(
        word_vectors=torch.randn(batch, cfg.word_dim, ts, dtype=dtype),
        sentence_vector=torch.randn(batch, cfg.word_dim, dtype=dtype),
        pad_mask=torch.ones(batch, ts, dtype=torch.bool),
    )
    size = cfg.stage_resolutions[-1]
    masks = torch.zeros(t, size, size, dtype=dtype)
    boxes = []
    for i in range(t):
        lo = 2 + 10 * i
        hi = lo + 10
        masks[i, lo:hi, lo:hi] = 1.0
        boxes.append([lo / size, lo / size, 10 / size, 10 / size])
    layout = Layout(
        labels=torch.arange(t) % cfg.num_classes,
        boxes=torch.tensor(boxes, dtype=dtype),
        masks=masks,
    )
    word_ids = torch.randint(0, 7, (batch, ts))
    z = torch.randn(batch, cfg.noise_dim, dtype=dtype)
    return enc, layout, word_ids, z


def _modules(cfg, vocab=7, dtype=torch.float32):
    gen = ImageGenerator(cfg)
    ca = CondAugment(cfg.word_dim, cfg.cond_dim)
    le = LabelEmbeddings(cfg.num_classes, cfg.label_dim)
    we = WordLabelEmbeddings(vocab, cfg.label_dim)
    if dtype == torch.float64:
        gen, ca, le, we = gen.double(), ca.double(), le.double(), we.double()
    return gen.eval(), ca, le, we


def test_config_invariants():
    cfg = _tiny_cfg()
    r = cfg.stage_resolutions
    assert r[1] == 2 * r[0] and r[2] == 4 * r[0]
    with pytest.raises(ValueError):
        _tiny_cfg(residual_counts=(0, 1, 1))
    with pytest.raises(ValueError):
        _tiny_cfg(base_resolution=12)


def test_shape_path_zero_input_zero_output():
    path = ShapePath(num_classes=3, base_channels=4).eval()
    with torch.no_grad():
        for m in path.modules():
            if isinstance(m, torch.nn.Conv2d):
                m.bias.zero_()
    out = path(torch.zeros(1, 3, 16, 16))
    assert out.shape == (1, 4, 8, 8)
    assert torch.allclose(out, torch.zeros_like(out), atol=1e-6)


def test_shape_path_halves_resolution_and_checks_channels():
    path = ShapePath(num_classes=5, base_channels=4)
    out = path(torch.randn(2, 5, 32, 32))
    assert out.shape == (2, 4, 16, 16)
    with pytest.raises(ValueError):
        path(torch.randn(1, 3, 32, 32))


def test_shape_path_matches_direct_convolution():
    path = ShapePath(num_classes=1, base_channels=2).eval()
    x = torch.randn(1, 1, 8, 8)
    got = path.encode[1](torch.nn.functional.pad(x, (1, 1, 1, 1), mode="reflect"))
    conv = path.encode[1]
    want = torch.nn.functional.conv2d(
        torch.nn.functional.pad(x, (1, 1, 1, 1), mode="reflect"),
        conv.weight, conv.bias,
    )
    assert torch.allclose(got, want, atol=1e-6)


def test_cascade_shapes_and_bounds():
    cfg = _tiny_cfg()
    gen, ca, le, we = _modules(cfg)
    enc, layout, word_ids, z = _inputs(cfg)
    cond = ca(enc.sentence_vector)
    states, records = gen(enc, [layout], z, cond, le, we, word_ids)
    for k, state in enumerate(states):
        r = cfg.stage_resolutions[k]
        assert state.image.shape == (1, 3, r, r)
        assert state.hidden.shape == (1, cfg.base_channels, r, r)
        assert float(state.image.detach().abs().max()) <= 1.0
    assert len(records["beta_pat"]) == 2
    assert records["beta_obj"][0].shape[0] == layout.count


def test_cascade_deterministic():
    cfg = _tiny_cfg()
    gen, ca, le, we = _modules(cfg)
    enc, layout, word_ids, z = _inputs(cfg)
    cond = ca(enc.sentence_vector)
    with torch.no_grad():
        a, _ = gen(enc, [layout], z, cond, le, we, word_ids)
        b, _ = gen(enc, [layout], z, cond, le, we, word_ids)
    for sa, sb in zip(a, b):
        assert torch.equal(sa.image, sb.image)


def test_empty_layout_runs_with_zero_context_maps():
    cfg = _tiny_cfg()
    gen, ca, le, we = _modules(cfg)
    enc, _, word_ids, z = _inputs(cfg)
    empty = Layout(
        labels=torch.zeros(0, dtype=torch.long),
        boxes=torch.zeros(0, 4),
        masks=torch.zeros(0, 32, 32),
    )
    cond = ca(enc.sentence_vector)
    states, records = gen(enc, [empty], z, cond, le, we, word_ids)
    assert states[-1].image.shape == (1, 3, 32, 32)
    assert records["beta_obj"][0].shape[0] == 0
    c_obj, c_lab = gen.context_maps(empty, le(empty.labels), torch.zeros(0, 4), 8, torch.float32)
    assert torch.all(c_obj == 0) and torch.all(c_lab == 0)


def test_label_perturbation_changes_context_only_inside_mask():
    cfg = _tiny_cfg()
    gen, ca, le, we = _modules(cfg)
    enc, layout, word_ids, z = _inputs(cfg, t=2)
    emb = le(layout.labels)
    ctx, _ = gen.object_attention(
        emb, we(word_ids)[0].transpose(0, 1), enc.word_vectors[0], enc.pad_mask[0]
    )
    c_obj_a, c_lab_a = gen.context_maps(layout, emb, ctx, 16, torch.float32)

    flipped = layout.labels.clone()
    flipped[0] = (flipped[0] + 1) % cfg.num_classes
    emb_b = le(flipped)
    ctx_b, _ = gen.object_attention(
        emb_b, we(word_ids)[0].transpose(0, 1), enc.word_vectors[0], enc.pad_mask[0]
    )
    c_obj_b, c_lab_b = gen.context_maps(layout, emb_b, ctx_b, 16, torch.float32)

    mask0 = _resize_masks(layout.masks, 16)[0] > 0
    diff_lab = (c_lab_a != c_lab_b).any(dim=0)
    diff_obj = (c_obj_a != c_obj_b).any(dim=0)
    assert bool(diff_lab[mask0].any())
    assert not bool(diff_lab[~mask0].any())
    assert not bool(diff_obj[~mask0].any())


def test_refine_zero_shape_encoding_is_identity_on_sum_path():
    cfg = _tiny_cfg()
    gen, ca, le, we = _modules(cfg)
    refiner = gen.refine1
    with torch.no_grad():
        for m in refiner.shape_path.modules():
            if isinstance(m, torch.nn.Conv2d):
                m.bias.zero_()
    prev = torch.randn(1, cfg.base_channels, 8, 8)
    u = refiner.shape_path(torch.zeros(1, cfg.num_classes, 16, 16))
    assert torch.allclose(prev + u, prev, atol=1e-6)


def test_refine_resolution_mismatch_errors():
    cfg = _tiny_cfg()
    gen, ca, le, we = _modules(cfg)
    enc, layout, word_ids, z = _inputs(cfg)
    with pytest.raises(ValueError):
        gen.refine1(
            torch.randn(1, cfg.base_channels, 4, 4),  # wrong trunk size
            enc.word_vectors, enc.pad_mask,
            torch.zeros(1, cfg.num_classes, 16, 16),
            torch.zeros(1, cfg.base_channels, 8, 8),
            torch.zeros(1, cfg.label_dim, 8, 8),
        )


def test_channel_bookkeeping_random_configs():
    torch.manual_seed(1)
    for _ in range(5):
        ng = int(torch.randint(2, 8, (1,)))
        nl = int(torch.randint(2, 8, (1,)))
        base = int(torch.randint(1, 3, (1,))) * 8
        cfg = _tiny_cfg(base_channels=ng, label_dim=nl, base_resolution=base)
        gen, ca, le, we = _modules(cfg)
        enc, layout, word_ids, z = _inputs(cfg)
        cond = ca(enc.sentence_vector)
        states, _ = gen(enc, [layout], z, cond, le, we, word_ids)
        for k, state in enumerate(states):
            r = cfg.stage_resolutions[k]
            assert state.image.shape == (1, 3, r, r)
            assert state.hidden.shape[1] == ng


def test_gradients_reach_all_inputs_and_parameters():
    cfg = _tiny_cfg()
    gen, ca, le, we = _modules(cfg, dtype=torch.float64)
    enc, layout, word_ids, z = _inputs(cfg, dtype=torch.float64)
    z.requires_grad_(True)
    enc.word_vectors.requires_grad_(True)
    cond = ca(enc.sentence_vector)
    states, _ = gen(enc, [layout], z, cond, le, we, word_ids)
    loss = states[-1].image.square().mean()
    loss.backward()
    assert z.grad is not None and float(z.grad.abs().sum()) > 0
    assert enc.word_vectors.grad is not None and float(enc.word_vectors.grad.abs().sum()) > 0
    assert le.table.weight.grad is not None and float(le.table.weight.grad.abs().sum()) > 0
    assert we.table.weight.grad is not None
    for name, p in gen.named_parameters():
        # the per-stage image heads of earlier stages feed only their own
        # stage's output, not the final image
        if name.startswith(("base.to_image", "refine1.to_image")):
            continue
        assert p.grad is not None, name

    # with a loss on every stage output, every parameter is on some path
    gen.zero_grad()
    cond = ca(enc.sentence_vector)
    states, _ = gen(enc, [layout], z, cond, le, we, word_ids)
    sum(s.image.square().mean() for s in states).backward()
    for name, p in gen.named_parameters():
        assert p.grad is not None, name


def test_up_block_doubles_resolution():
    blk = up_block(4, 6)
    out = blk(torch.randn(2, 4, 8, 8))
    assert out.shape == (2, 6, 16, 16)
