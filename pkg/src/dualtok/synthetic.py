"""Planted-correspondence dataset generator.

Each pair draws a small set of shared latent concept vectors. Image
tokens are a fixed random linear map of those concepts; text tokens are
a different fixed random map of the same concepts; global vectors map
the mean concept. Gaussian noise (optionally zero) is added everywhere,
so the cross-modal matching is known by construction and learnable.

Image samples are routed through the region/box pipeline: every token
gets a random box in a 640x480 frame, so stored image rows carry d + 4
columns (features plus normalized coordinates) exactly like ingested
detector output.

Determinism: one PCG64 stream seeded from cfg.seed, drawn in a fixed
documented order (concepts, image map, text map, then per pair: concept
choice, boxes, image token noise, image global noise, text token noise,
text global noise). Same config, same bytes.

Pairing file format: one "image_id<TAB>text_id" line per pair. Text ids
are offset by num_pairs so the two id spaces never collide.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoder import build_image_tokens
from .errors import DataError, DomainError
from .features import Modality, RawImageInput, SampleFeatures, write_feature_file

FRAME_W = 640
FRAME_H = 480


@dataclass(frozen=True)
class SyntheticDataConfig:
    num_pairs: int = 512
    num_concepts: int = 64
    concepts_per_sample: int = 4
    tokens_per_sample: int = 8
    latent_dim: int = 32
    image_feature_dim: int = 32  # stored image rows get 4 extra box columns
    text_feature_dim: int = 32
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        counts = (
            self.num_pairs, self.num_concepts, self.concepts_per_sample,
            self.tokens_per_sample, self.latent_dim,
            self.image_feature_dim, self.text_feature_dim,
        )
        if any(c < 1 for c in counts):
            raise DomainError("all synthetic dataset counts and dims must be >= 1")
        if self.concepts_per_sample > self.num_concepts:
            raise DomainError(
                f"concepts_per_sample {self.concepts_per_sample} exceeds "
                f"num_concepts {self.num_concepts}"
            )
        if not (math.isfinite(self.noise_std) and self.noise_std >= 0.0):
            raise DomainError(f"noise_std must be finite and >= 0, got {self.noise_std}")
        if self.seed < 0:
            raise DomainError("seed must be a nonnegative integer")


def generate_synthetic_dataset(
    cfg: SyntheticDataConfig,
) -> tuple[list[SampleFeatures], list[SampleFeatures], list[tuple[int, int]]]:
    """Build aligned image and text samples plus their id pairing."""
    rng = np.random.Generator(np.random.PCG64(cfg.seed))

    concepts = rng.standard_normal((cfg.num_concepts, cfg.latent_dim))
    concepts /= np.linalg.norm(concepts, axis=1, keepdims=True)
    image_map = rng.standard_normal((cfg.latent_dim, cfg.image_feature_dim))
    image_map /= math.sqrt(cfg.latent_dim)
    text_map = rng.standard_normal((cfg.latent_dim, cfg.text_feature_dim))
    text_map /= math.sqrt(cfg.latent_dim)

    n_tok = cfg.tokens_per_sample
    images: list[SampleFeatures] = []
    texts: list[SampleFeatures] = []
    pairs: list[tuple[int, int]] = []
    for i in range(cfg.num_pairs):
        chosen = rng.choice(cfg.num_concepts, size=cfg.concepts_per_sample, replace=False)
        token_latents = concepts[chosen[np.arange(n_tok) % cfg.concepts_per_sample]]
        mean_latent = concepts[chosen].mean(axis=0)

        xs = np.sort(rng.uniform(0.0, FRAME_W, size=(n_tok, 2)), axis=1)
        ys = np.sort(rng.uniform(0.0, FRAME_H, size=(n_tok, 2)), axis=1)
        boxes = np.stack([xs[:, 0], ys[:, 0], xs[:, 1], ys[:, 1]], axis=1)

        regions = token_latents @ image_map \
            + cfg.noise_std * rng.standard_normal((n_tok, cfg.image_feature_dim))
        img_global = mean_latent @ image_map \
            + cfg.noise_std * rng.standard_normal(cfg.image_feature_dim)
        raw = RawImageInput(
            region_features=regions.astype(np.float32),
            boxes=boxes.astype(np.float32),
            image_width=FRAME_W, image_height=FRAME_H,
            global_feature=img_global.astype(np.float32),
        )
        stacked = build_image_tokens(raw)
        images.append(SampleFeatures(i, Modality.IMAGE, stacked[0], stacked[1:]))

        txt_tokens = token_latents @ text_map \
            + cfg.noise_std * rng.standard_normal((n_tok, cfg.text_feature_dim))
        txt_global = mean_latent @ text_map \
            + cfg.noise_std * rng.standard_normal(cfg.text_feature_dim)
        text_id = cfg.num_pairs + i
        texts.append(SampleFeatures(text_id, Modality.TEXT,
                                    txt_global.astype(np.float32),
                                    txt_tokens.astype(np.float32)))
        pairs.append((i, text_id))
    return images, texts, pairs


def write_pairs(pairs: list[tuple[int, int]], dest) -> None:
    for img_id, txt_id in pairs:
        dest.write(f"{img_id}\t{txt_id}\n")


def read_pairs(source) -> list[tuple[int, int]]:
    pairs = []
    for lineno, line in enumerate(source, start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"pairing line {lineno}: expected 2 tab-separated fields")
        try:
            img_id, txt_id = int(parts[0]), int(parts[1])
        except ValueError as err:
            raise DataError(f"pairing line {lineno}: non-integer id") from err
        if img_id < 0 or txt_id < 0:
            raise DataError(f"pairing line {lineno}: ids must be nonnegative")
        pairs.append((img_id, txt_id))
    return pairs


def write_synthetic_dataset(cfg: SyntheticDataConfig, out_dir) -> dict[str, Path]:
    """Generate and persist the three dataset files under out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images, texts, pairs = generate_synthetic_dataset(cfg)
    paths = {
        "images": out / "images.tgf",
        "texts": out / "texts.tgf",
        "pairs": out / "pairs.tsv",
    }
    with open(paths["images"], "wb") as f:
        write_feature_file(images, f)
    with open(paths["texts"], "wb") as f:
        write_feature_file(texts, f)
    with open(paths["pairs"], "w", encoding="utf-8") as f:
        write_pairs(pairs, f)
    return paths
