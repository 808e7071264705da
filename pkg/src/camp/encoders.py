"""Feature encoders: region projection and bidirectional recurrent word features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from camp import tensor as tz
from camp.config import PAD_TOKEN, ModelConfig
from camp.params import EncoderParams, GruParams
from camp.tensor import Tensor


class EncodingError(ValueError):
    """Invalid raw inputs handed to an encoder."""


@dataclass
class RawRegionFeatures:
    """Pooled descriptors of the detected image regions, one column each."""

    features: Tensor  # (raw_region_dim, R)

    def __post_init__(self):
        if self.features.data.ndim != 2 or self.features.shape[1] < 1:
            raise EncodingError(f"region features must be (dim, R>=1), got {self.features.shape}")
        if not np.isfinite(self.features.data).all():
            raise EncodingError("region features contain non-finite values")

    @property
    def region_count(self) -> int:
        return self.features.shape[1]


@dataclass
class TokenSequence:
    """Token ids padded to a fixed length, with a validity mask."""

    ids: list[int]
    mask: np.ndarray  # bool, True where the token is real
    vocab_size: int

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if len(self.ids) != self.mask.size:
            raise EncodingError("ids and mask lengths differ")
        if not self.mask.any():
            raise EncodingError("token sequence has no real tokens")
        if any(i < 0 or i >= self.vocab_size for i in self.ids):
            raise EncodingError(f"token id out of range for vocab of {self.vocab_size}")


def clip_and_pad(words: list[int], vocab_size: int, max_words: int = 50) -> TokenSequence:
    """Clip to ``max_words`` real tokens and pad the remainder."""
    if not words:
        raise EncodingError("cannot encode an empty token list")
    kept = list(words[:max_words])
    n_real = len(kept)
    ids = kept + [PAD_TOKEN] * (max_words - n_real)
    mask = np.zeros(max_words, dtype=bool)
    mask[:n_real] = True
    return TokenSequence(ids=ids, mask=mask, vocab_size=vocab_size)


def project_regions(raw: RawRegionFeatures, p: EncoderParams) -> Tensor:
    """Affine projection of each raw region column into the shared space."""
    return tz.linear(raw.features, p.region_w, p.region_b)


def _gru_step(cell: GruParams, x: Tensor, h: Tensor, ones_col: Tensor) -> Tensor:
    update = tz.sigmoid(tz.add(tz.linear(x, cell.w_update, cell.b_update),
                               tz.matmul(cell.u_update, h)))
    reset = tz.sigmoid(tz.add(tz.linear(x, cell.w_reset, cell.b_reset),
                              tz.matmul(cell.u_reset, h)))
    cand = tz.tanh(tz.add(tz.linear(x, cell.w_cand, cell.b_cand),
                          tz.matmul(cell.u_cand, tz.mul(reset, h))))
    keep = tz.sub(ones_col, update)
    return tz.add(tz.mul(keep, h), tz.mul(update, cand))


def encode_words(tokens: TokenSequence, p: EncoderParams) -> Tensor:
    """Word features: mean of forward and backward recurrent states per position.

    The recurrence starts from zero states and steps over every position,
    padding included; downstream attention masks the padded columns.
    """
    hidden = p.fwd.u_update.shape[0]
    n = len(tokens.ids)
    embedded = [tz.gather_columns(p.embed, [i]) for i in tokens.ids]
    ones_col = Tensor(np.ones((hidden, 1)))

    h = Tensor(np.zeros((hidden, 1)))
    fwd_states = []
    for x in embedded:
        h = _gru_step(p.fwd, x, h, ones_col)
        fwd_states.append(h)

    h = Tensor(np.zeros((hidden, 1)))
    bwd_states: list[Tensor] = [None] * n
    for i in range(n - 1, -1, -1):
        h = _gru_step(p.bwd, embedded[i], h, ones_col)
        bwd_states[i] = h

    cols = [tz.scale(tz.add(f, b), 0.5) for f, b in zip(fwd_states, bwd_states)]
    return tz.concat_cols(cols)


def encode_image(raw: np.ndarray, p: EncoderParams) -> Tensor:
    """Convenience wrapper: raw (dim, R) array -> projected region features."""
    return project_regions(RawRegionFeatures(Tensor(raw)), p)


def encode_caption(
    words: list[int], p: EncoderParams, cfg: ModelConfig
) -> tuple[Tensor, np.ndarray]:
    """Convenience wrapper: token ids -> (word features, validity mask)."""
    tokens = clip_and_pad(words, cfg.vocab_size, cfg.max_words)
    return encode_words(tokens, p), tokens.mask
