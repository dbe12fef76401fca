import numpy as np
import pytest
import torch

from oracles import lstm_reference
from scenesynth.text import (
    EOS_ID,
    PAD_ID,
    CondAugment,
    LabelEmbeddings,
    TextEncoder,
    Vocabulary,
    build_vocab,
    caption_to_ids,
    pad_id_batch,
)


def test_build_vocab_single_caption():
    vocab = build_vocab(["a red circle"])
    assert len(vocab) == 6
    assert vocab.id_to_token[:3] == ["<pad>", "<unk>", "<eos>"]
    assert set(vocab.id_to_token[3:]) == {"a", "red", "circle"}


def test_build_vocab_deterministic():
    corpus = ["a red circle", "a blue square above a red ring"]
    v1 = build_vocab(corpus)
    v2 = build_vocab(corpus)
    assert v1.id_to_token == v2.id_to_token


def test_build_vocab_tie_break_matches_reference_sort():
    corpus = ["delta alpha", "charlie bravo"]
    vocab = build_vocab(corpus)
    # all tokens occur once: reference order is plain lexicographic
    assert vocab.id_to_token[3:] == sorted("delta alpha charlie bravo".split())


def test_build_vocab_empty_corpus_errors():
    with pytest.raises(ValueError):
        build_vocab([])


def test_vocab_roundtrip_and_file(tmp_path):
    vocab = build_vocab(["a red circle to the left of a blue square"])
    for token in ("red", "circle", "left"):
        assert vocab.decode([vocab.token_to_id[token]]) == [token]
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    again = Vocabulary.load(path)
    assert again.id_to_token == vocab.id_to_token
    lines = path.read_text().splitlines()
    assert lines[0] == "<pad>" and lines[vocab.token_to_id["red"]] == "red"


def test_paper_scale_dims():
    enc = TextEncoder(vocab_size=10, embed_dim=300, hidden_size=128)
    assert enc.output_dim == 256
    out = enc.eval()(torch.tensor([[3, 4]]), torch.tensor([2]))
    assert out.word_vectors.shape == (1, 256, 2)
    assert out.sentence_vector.shape == (1, 256)


def test_single_token_sentence():
    enc = TextEncoder(vocab_size=5, embed_dim=4, hidden_size=3).eval()
    out = enc(torch.tensor([[2]]), torch.tensor([1]))
    assert out.word_vectors.shape == (1, 6, 1)
    # with one step, the word vector equals the two concatenated final states
    assert torch.allclose(out.word_vectors[0, :, 0], out.sentence_vector[0])


def test_encoder_matches_reference_recurrence():
    torch.manual_seed(3)
    enc = TextEncoder(vocab_size=6, embed_dim=3, hidden_size=2, dropout=0.0).eval()
    ids = torch.tensor([[2, 4]])
    out = enc(ids, torch.tensor([2]))

    emb = enc.embedding.weight.detach().numpy()
    x = emb[[2, 4]]
    w_ih = enc.lstm.weight_ih_l0.detach().numpy()
    w_hh = enc.lstm.weight_hh_l0.detach().numpy()
    b_ih = enc.lstm.bias_ih_l0.detach().numpy()
    b_hh = enc.lstm.bias_hh_l0.detach().numpy()
    fwd_states, fwd_h, _ = lstm_reference(x, w_ih, w_hh, b_ih, b_hh)
    w_ih_r = enc.lstm.weight_ih_l0_reverse.detach().numpy()
    w_hh_r = enc.lstm.weight_hh_l0_reverse.detach().numpy()
    b_ih_r = enc.lstm.bias_ih_l0_reverse.detach().numpy()
    b_hh_r = enc.lstm.bias_hh_l0_reverse.detach().numpy()
    bwd_states, bwd_h, _ = lstm_reference(x[::-1].copy(), w_ih_r, w_hh_r, b_ih_r, b_hh_r)

    want_words = np.concatenate([fwd_states, bwd_states[::-1]], axis=1).T
    np.testing.assert_allclose(out.word_vectors[0].detach().numpy(), want_words, atol=1e-5)
    want_sentence = np.concatenate([fwd_h, bwd_h])
    np.testing.assert_allclose(out.sentence_vector[0].detach().numpy(), want_sentence, atol=1e-5)


def test_sentence_vector_ignores_trailing_pad():
    enc = TextEncoder(vocab_size=8, embed_dim=4, hidden_size=3, dropout=0.0).eval()
    short = enc(torch.tensor([[5, 3]]), torch.tensor([2]))
    padded = enc(torch.tensor([[5, 3, PAD_ID, PAD_ID]]), torch.tensor([2]))
    assert torch.allclose(short.sentence_vector, padded.sentence_vector)
    assert torch.all(padded.word_vectors[0, :, 2:] == 0)
    assert padded.pad_mask.tolist() == [[True, True, False, False]]


def test_encoder_deterministic():
    enc = TextEncoder(vocab_size=8, embed_dim=4, hidden_size=3, dropout=0.0).eval()
    ids, lengths = torch.tensor([[5, 3, 2]]), torch.tensor([3])
    a = enc(ids, lengths)
    b = enc(ids, lengths)
    assert torch.equal(a.word_vectors, b.word_vectors)
    assert torch.equal(a.sentence_vector, b.sentence_vector)


def test_encoder_rejects_bad_input():
    enc = TextEncoder(vocab_size=5, embed_dim=3, hidden_size=2, max_len=4)
    with pytest.raises(ValueError):
        enc(torch.tensor([[7]]), torch.tensor([1]))
    with pytest.raises(ValueError):
        enc(torch.tensor([[1, 2, 3, 1, 2]]), torch.tensor([5]))


def test_embedding_gradient_matches_fd():
    torch.manual_seed(1)
    enc = TextEncoder(vocab_size=5, embed_dim=3, hidden_size=2, dropout=0.0).double().eval()
    ids, lengths = torch.tensor([[2, 3]]), torch.tensor([2])
    readout = torch.randn(1, 4, 2, dtype=torch.float64)

    def scalar():
        return float((enc(ids, lengths).word_vectors * readout).sum())

    out = (enc(ids, lengths).word_vectors * readout).sum()
    out.backward()
    grad = enc.embedding.weight.grad.detach().numpy().copy()

    weight = enc.embedding.weight.data

    def fn(_w):
        return scalar()

    fd = np.zeros_like(grad)
    eps = 1e-6
    with torch.no_grad():
        for i in range(weight.shape[0]):
            for j in range(weight.shape[1]):
                orig = float(weight[i, j])
                weight[i, j] = orig + eps
                hi = scalar()
                weight[i, j] = orig - eps
                lo = scalar()
                weight[i, j] = orig
                fd[i, j] = (hi - lo) / (2 * eps)
    denom = max(np.linalg.norm(grad), np.linalg.norm(fd))
    assert np.linalg.norm(grad - fd) / denom <= 1e-4


def test_label_embeddings():
    table = LabelEmbeddings(num_classes=4, dim=5)
    rows = table(torch.tensor([0, 0]))
    assert rows.shape == (2, 5)
    assert torch.equal(rows[0], rows[1])
    empty = table(torch.zeros(0, dtype=torch.long))
    assert empty.shape == (0, 5)
    with pytest.raises(ValueError):
        table(torch.tensor([4]))
    # direct indexing oracle
    labels = torch.tensor([2, 1, 3])
    got = table(labels)
    for i, lab in enumerate(labels.tolist()):
        assert torch.equal(got[i], table.table.weight[lab])


def test_cond_augment():
    ca = CondAugment(2, 2)
    with torch.no_grad():
        ca.fc.weight.zero_()
        ca.fc.bias.zero_()
    assert torch.all(ca(torch.tensor([[1.0, -2.0]])) == 0)
    with torch.no_grad():
        ca.fc.weight.copy_(torch.tensor([[1.0, 0.0], [0.0, -1.0]]))
        ca.fc.bias.copy_(torch.tensor([0.5, 0.5]))
    out = ca(torch.tensor([[2.0, 3.0]]))
    # hand evaluation: relu([2 + 0.5, -3 + 0.5]) = [2.5, 0]
    assert torch.allclose(out, torch.tensor([[2.5, 0.0]]))
    assert bool((out >= 0).all())


def test_cond_augment_default_output_length():
    ca = CondAugment(256)
    assert ca.fc.out_features == 256


def test_caption_to_ids_appends_eos():
    vocab = build_vocab(["a red circle"])
    ids = caption_to_ids("a red circle", vocab, max_len=8)
    assert ids[-1] == EOS_ID
    assert len(ids) == 4
    with pytest.raises(ValueError):
        caption_to_ids("a red circle", vocab, max_len=2)


def test_pad_id_batch():
    batch, lengths = pad_id_batch([[3, 4], [5]])
    assert batch.tolist() == [[3, 4], [5, PAD_ID]]
    assert lengths.tolist() == [2, 1]
