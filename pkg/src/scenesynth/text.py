"""Tokenization, vocabulary, recurrent text encoding, label embeddings, and
conditioning augmentation.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .toyscenes import tokenize

PAD, UNK, EOS = "<pad>", "<unk>", "<eos>"
PAD_ID, UNK_ID, EOS_ID = 0, 1, 2


class Vocabulary:
    """Token/id bijection with fixed special tokens at ids 0..2."""

    def __init__(self, tokens: list[str]):
        self.id_to_token = [PAD, UNK, EOS] + list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def encode(self, tokens: list[str]) -> list[int]:
        return [self.token_to_id.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: list[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    def save(self, path: str) -> None:
        """One token per line; the line number is the id."""
        Path(path).write_text("\n".join(self.id_to_token) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if lines[:3] != [PAD, UNK, EOS]:
            raise ValueError(f"{path} does not start with the special tokens")
        return cls(lines[3:])


def build_vocab(corpus: list[str]) -> Vocabulary:
    """Count tokens over the corpus; order by frequency desc, then lexicographic."""
    if not corpus:
        raise ValueError("empty corpus")
    counts = Counter()
    for caption in corpus:
        counts.update(tokenize(caption))
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary([tok for tok, _ in ordered])


def caption_to_ids(caption: str, vocab: Vocabulary, max_len: int) -> list[int]:
    """Tokenize, map to ids, and append the end marker."""
    ids = vocab.encode(tokenize(caption)) + [EOS_ID]
    if not ids:
        raise ValueError("empty caption")
    if len(ids) > max_len:
        raise ValueError(f"caption exceeds max length {max_len}")
    return ids


@dataclass
class TextEncoding:
    """Batched encoder output.

    word_vectors: (B, D, Ts), zero at padded positions
    sentence_vector: (B, D), concatenated final states of both directions
    pad_mask: (B, Ts) bool, True at real tokens
    """

    word_vectors: torch.Tensor
    sentence_vector: torch.Tensor
    pad_mask: torch.Tensor

    @property
    def lengths(self) -> torch.Tensor:
        return self.pad_mask.sum(dim=1)


def pad_id_batch(id_lists: list[list[int]], min_width: int = 1):
    """Stack variable-length id lists into (B, Ts) with PAD fill."""
    width = max(min_width, max(len(ids) for ids in id_lists))
    batch = torch.full((len(id_lists), width), PAD_ID, dtype=torch.long)
    for row, ids in enumerate(id_lists):
        batch[row, : len(ids)] = torch.tensor(ids, dtype=torch.long)
    lengths = torch.tensor([len(ids) for ids in id_lists], dtype=torch.long)
    return batch, lengths


class TextEncoder(nn.Module):
    """Bidirectional recurrent encoder producing word vectors and a sentence vector.

    The word vector size D is twice the per-direction hidden size. The final
    hidden states of the two directions are concatenated into the sentence
    vector, so trailing padding cannot affect it.
    """

    def __init__(self, vocab_size: int, embed_dim: int = 300, hidden_size: int = 128,
                 dropout: float = 0.5, max_len: int = 24):
        super().__init__()
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.embedding = nn.Embedding(vocab_size, embed_dim, padding_idx=PAD_ID)
        self.dropout = nn.Dropout(dropout)
        self.lstm = nn.LSTM(embed_dim, hidden_size, batch_first=True, bidirectional=True)

    @property
    def output_dim(self) -> int:
        return 2 * self.lstm.hidden_size

    def forward(self, ids: torch.Tensor, lengths: torch.Tensor) -> TextEncoding:
        if ids.numel() == 0 or int(lengths.min()) < 1:
            raise ValueError("every sequence must contain at least one token")
        if ids.size(1) > self.max_len:
            raise ValueError(f"sequence length {ids.size(1)} exceeds max {self.max_len}")
        if int(ids.max()) >= self.vocab_size or int(ids.min()) < 0:
            raise ValueError("token id out of range")
        emb = self.dropout(self.embedding(ids))
        packed = pack_padded_sequence(
            emb, lengths.cpu(), batch_first=True, enforce_sorted=False
        )
        out, (h_n, _) = self.lstm(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=ids.size(1))
        sentence = torch.cat([h_n[0], h_n[1]], dim=1)
        pad_mask = torch.arange(ids.size(1), device=ids.device)[None, :] < lengths[:, None]
        return TextEncoding(out.transpose(1, 2), sentence, pad_mask)

    def encode_ids(self, id_lists: list[list[int]]) -> TextEncoding:
        ids, lengths = pad_id_batch(id_lists)
        p = next(self.parameters())
        return self.forward(ids.to(p.device), lengths)


class LabelEmbeddings(nn.Module):
    """Trainable class-label embedding table (one row per class)."""

    def __init__(self, num_classes: int, dim: int = 50):
        super().__init__()
        self.num_classes = num_classes
        self.table = nn.Embedding(num_classes, dim)

    @property
    def dim(self) -> int:
        return self.table.embedding_dim

    def forward(self, labels: torch.Tensor) -> torch.Tensor:
        if labels.numel() == 0:
            return torch.zeros(
                labels.shape + (self.dim,),
                dtype=self.table.weight.dtype,
                device=self.table.weight.device,
            )
        if int(labels.max()) >= self.num_classes or int(labels.min()) < 0:
            raise ValueError("label id out of range")
        return self.table(labels)


class WordLabelEmbeddings(nn.Module):
    """Embeds vocabulary tokens into the label embedding space, so class labels
    can attend over caption words."""

    def __init__(self, vocab_size: int, dim: int = 50):
        super().__init__()
        self.table = nn.Embedding(vocab_size, dim, padding_idx=PAD_ID)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        return self.table(ids)


class CondAugment(nn.Module):
    """Fully connected layer plus ReLU mapping the sentence vector to the
    conditioning vector consumed by the generator and discriminators."""

    def __init__(self, in_dim: int, out_dim: int = 256):
        super().__init__()
        self.fc = nn.Linear(in_dim, out_dim)

    def forward(self, sentence: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(sentence).all():
            raise ValueError("sentence vector must be finite")
        return torch.relu(self.fc(sentence))
