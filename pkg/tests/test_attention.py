import numpy as np
import pytest
import torch

from oracles import per_pixel_max_distribute, softmax
from scenesynth.attention import (
    GridAttention,
    distribute_vectors,
    grid_attention,
    object_attention,
)


def _uniform_case(ts=4):
    h = torch.zeros(1, 2, 2, 2)
    words = torch.randn(1, 2, ts)
    pad = torch.ones(1, ts, dtype=torch.bool)
    return h, words, pad


def test_grid_attention_uniform_scores():
    h, words, pad = _uniform_case()
    ctx, beta = grid_attention(h, words, pad)
    assert torch.allclose(beta, torch.full_like(beta, 0.25))
    mean = words.mean(dim=2)[0]
    for j in range(4):
        assert torch.allclose(ctx[0].reshape(2, 4)[:, j], mean, atol=1e-6)


def test_grid_attention_hand_case():
    # query (1, 0) against words (2, 0) and (0, 2): scores (2, 0)
    h = torch.tensor([[[[1.0]], [[0.0]]]])
    words = torch.tensor([[[2.0, 0.0], [0.0, 2.0]]])
    pad = torch.ones(1, 2, dtype=torch.bool)
    _, beta = grid_attention(h, words, pad)
    want = softmax(np.array([2.0, 0.0]))
    np.testing.assert_allclose(beta[0, 0].numpy(), want, atol=1e-4)
    assert abs(float(beta[0, 0, 0]) - 0.8808) < 1e-3


def test_grid_attention_word_permutation():
    torch.manual_seed(1)
    h = torch.randn(1, 3, 2, 2)
    words = torch.randn(1, 3, 4)
    pad = torch.ones(1, 4, dtype=torch.bool)
    _, beta = grid_attention(h, words, pad)
    perm = [2, 0, 3, 1]
    _, beta_p = grid_attention(h, words[:, :, perm], pad)
    assert torch.allclose(beta_p, beta[:, :, perm], atol=1e-6)


def test_grid_attention_pad_columns_zero_and_rows_stochastic():
    torch.manual_seed(2)
    h = torch.randn(2, 3, 2, 2)
    words = torch.randn(2, 3, 5)
    pad = torch.tensor([[True, True, True, False, False]] * 2)
    _, beta = grid_attention(h, words, pad)
    assert torch.all(beta[:, :, 3:] == 0)
    assert torch.allclose(beta.sum(dim=2), torch.ones(2, 4), atol=1e-6)


def test_grid_attention_all_pad_errors():
    h, words, _ = _uniform_case()
    pad = torch.zeros(1, 4, dtype=torch.bool)
    with pytest.raises(ValueError):
        grid_attention(h, words, pad)


def test_grid_attention_projection_bridges_dims():
    torch.manual_seed(0)
    attn = GridAttention(word_dim=6, channels=3)
    h = torch.randn(1, 3, 2, 2)
    words = torch.randn(1, 6, 4)
    pad = torch.ones(1, 4, dtype=torch.bool)
    ctx, beta = attn(h, words, pad)
    assert ctx.shape == (1, 3, 2, 2)
    assert torch.allclose(beta.sum(dim=2), torch.ones(1, 4), atol=1e-6)


def test_object_attention_dominant_word():
    # label embedding equals word 0's embedding; other words orthogonal
    queries = torch.tensor([[4.0, 0.0]])
    keys = torch.tensor([[4.0, 0.0, 0.0], [0.0, 4.0, 0.0]])  # (G=2, Ts=3)
    values = torch.randn(2, 3)
    pad = torch.ones(3, dtype=torch.bool)
    _, beta = object_attention(queries, keys, values, pad)
    assert int(beta[0].argmax()) == 0


def test_object_attention_independent_of_features_and_oracle():
    queries = torch.tensor([[1.0, 0.5]])
    keys = torch.tensor([[0.3, -0.2], [0.8, 0.1]])
    values = torch.tensor([[1.0, 0.0], [2.0, -1.0], [0.5, 3.0]])  # (C=3, Ts=2)
    pad = torch.ones(2, dtype=torch.bool)
    ctx, beta = object_attention(queries, keys, values, pad)
    scores = (queries.numpy() @ keys.numpy())[0]
    want_beta = softmax(scores)
    np.testing.assert_allclose(beta[0].numpy(), want_beta, atol=1e-6)
    want_ctx = values.numpy() @ want_beta
    np.testing.assert_allclose(ctx[0].numpy(), want_ctx, atol=1e-6)


def test_object_attention_empty_objects():
    ctx, beta = object_attention(
        torch.zeros(0, 2), torch.randn(2, 3), torch.randn(4, 3), torch.ones(3, dtype=torch.bool)
    )
    assert ctx.shape == (0, 4)
    assert beta.shape == (0, 3)


def test_distribute_no_objects_zero_map():
    out = distribute_vectors(torch.zeros(0, 3), torch.zeros(0, 4, 4))
    assert out.shape == (3, 4, 4)
    assert torch.all(out == 0)


def test_distribute_single_full_mask():
    vec = torch.tensor([[1.5, -2.0]])
    masks = torch.ones(1, 3, 3)
    out = distribute_vectors(vec, masks)
    assert torch.all(out[0] == 1.5)
    assert torch.all(out[1] == -2.0)


def test_distribute_overlap_elementwise_max():
    # contexts (1, 3) and (2, 2); overlap pixels take (2, 3)
    vecs = torch.tensor([[1.0, 3.0], [2.0, 2.0]])
    masks = torch.zeros(2, 4, 4)
    masks[0, :2, :] = 1.0   # top half
    masks[1, 1:3, :] = 1.0  # middle rows; row 1 overlaps
    out = distribute_vectors(vecs, masks)
    ref = per_pixel_max_distribute(vecs.numpy(), masks.numpy())
    np.testing.assert_array_equal(out.numpy(), ref)
    assert out[0, 1, 0] == 2.0 and out[1, 1, 0] == 3.0


def test_distribute_zero_outside_union_and_order_invariant():
    torch.manual_seed(3)
    vecs = torch.randn(3, 4)
    masks = (torch.rand(3, 6, 6) > 0.6).float()
    out = distribute_vectors(vecs, masks)
    union = masks.amax(dim=0) > 0
    assert torch.all(out[:, ~union] == 0)
    perm = [2, 0, 1]
    out_p = distribute_vectors(vecs[perm], masks[perm])
    assert torch.allclose(out, out_p)


def test_distribute_tie_gradient_lowest_index():
    vecs = torch.tensor([[1.0], [1.0]], requires_grad=True)
    masks = torch.ones(2, 1, 1)
    out = distribute_vectors(vecs, masks)
    out.sum().backward()
    assert vecs.grad[0].item() == 1.0
    assert vecs.grad[1].item() == 0.0
