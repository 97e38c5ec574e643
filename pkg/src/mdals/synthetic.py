"""Planted low-rank rating logs with Zipf-skewed popularity.

Users and items get latent factors of rank ``rank`` whose variance shrinks
by ``factor_decay`` per component, so the leading components carry most of
the signal. A pair is labelled positive when ``x.y / sqrt(rank) + noise > 0``.
Which pairs are observed is drawn from Zipf-Mandelbrot popularity weights
``(k + offset)^-exponent`` over a random ranking of users and of items, so a
few entities carry most interactions while the long tail has only a handful.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from .data import RatingLog

BASE_TIMESTAMP = 1_000_000_000


@dataclass(frozen=True)
class SyntheticConfig:
    num_users: int = 2000
    num_items: int = 2000
    interactions: int = 100_000
    rank: int = 4
    factor_decay: float = 0.5
    zipf_exponent: float = 1.2
    zipf_offset: float = 15.0
    noise: float = 0.35
    seed: int = 0

    def as_dict(self) -> dict:
        return asdict(self)

    def scaled(self, factor: float, entities: bool = True) -> "SyntheticConfig":
        """Interactions multiplied by ``factor``; users and items too when ``entities``."""
        grow = factor if entities else 1.0
        return replace(
            self,
            num_users=int(round(self.num_users * grow)),
            num_items=int(round(self.num_items * grow)),
            interactions=int(round(self.interactions * factor)),
        )


def zipf_weights(n: int, exponent: float, offset: float, rng: np.random.Generator) -> np.ndarray:
    ranks = rng.permutation(n) + 1.0
    w = (ranks + offset) ** -exponent
    return w / w.sum()


def _draw_pairs(cfg: SyntheticConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    wu = zipf_weights(cfg.num_users, cfg.zipf_exponent, cfg.zipf_offset, rng)
    wi = zipf_weights(cfg.num_items, cfg.zipf_exponent, cfg.zipf_offset, rng)
    limit = cfg.num_users * cfg.num_items
    target = min(cfg.interactions, limit)
    keys = np.zeros(0, dtype=np.int64)
    overdraw = 1.2
    for _ in range(50):
        missing = target - keys.size
        if missing <= 0:
            break
        u = rng.choice(cfg.num_users, size=int(missing * overdraw) + 16, p=wu)
        i = rng.choice(cfg.num_items, size=u.size, p=wi)
        fresh = u.astype(np.int64) * cfg.num_items + i
        # keep first occurrences in draw order so the result is seed-stable
        merged = np.concatenate([keys, fresh])
        _, first = np.unique(merged, return_index=True)
        gained = first.size - keys.size
        keys = merged[np.sort(first)]
        # size the next round by the observed yield of new pairs
        overdraw = min(1.2 * fresh.size / max(gained, 1), 64.0)
    keys = keys[:target]
    return keys // cfg.num_items, keys % cfg.num_items


def planted_factors(cfg: SyntheticConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    scale = np.sqrt(cfg.factor_decay ** np.arange(cfg.rank))
    x = rng.standard_normal((cfg.num_users, cfg.rank)) * scale
    y = rng.standard_normal((cfg.num_items, cfg.rank)) * scale
    return x, y


def generate(cfg: SyntheticConfig = SyntheticConfig()) -> RatingLog:
    """Rating log with 5-star positives and 1-star negatives and distinct timestamps."""
    rng = np.random.default_rng(cfg.seed)
    x, y = planted_factors(cfg, rng)
    users, items = _draw_pairs(cfg, rng)
    score = np.einsum("ij,ij->i", x[users], y[items]) / np.sqrt(cfg.rank)
    score += cfg.noise * rng.standard_normal(score.size)
    ratings = np.where(score > 0, 5.0, 1.0)
    stamps = BASE_TIMESTAMP + rng.permutation(users.size).astype(np.int64)
    return RatingLog(users.astype(str), items.astype(str), ratings, stamps)


def write_csv(log: RatingLog, path) -> None:
    """MovieLens ``ratings.csv`` layout with header."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("userId,movieId,rating,timestamp\n")
        for u, i, r, t in zip(log.users.tolist(), log.items.tolist(), log.ratings.tolist(), log.timestamps.tolist()):
            fh.write(f"{u},{i},{r:.1f},{t}\n")
