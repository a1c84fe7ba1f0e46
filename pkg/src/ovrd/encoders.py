"""Frozen vision-language encoders.

The mock encoder stands in for a pretrained image-text backbone. It is a
pure function of its inputs (every internal table is derived from content
hashes, never from live RNG state), so features are reproducible across
processes, and it carries the one property downstream training leans on:
regions and category names that refer to the same visual identity land near
each other in feature space, without any training.

How the mock builds a feature, in brief:
  - each pixel gets a smooth pseudo-random code of its RGB value, weighted
    by color saturation, so dark or gray content contributes no identity
    signal while saturated palette colors yield strong, near-orthogonal
    directions;
  - category names hash to a palette color (``identity_color``), and the
    text side runs the same color-to-code map on it, which is what makes
    zero-shot name matching work for categories never seen in training;
  - a small lexicon of geometric words gives relation names structured
    codes in a dedicated subspace, so learned geometry-to-text maps can
    generalize across related relation names;
  - texture moments plus a content-hash epsilon keep distinct inputs
    distinct.
"""

from __future__ import annotations

import colorsys
import hashlib
import os
import re
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from PIL import Image

TextToken = Union[str, torch.Tensor]

# words with structured semantic codes; relation names compose them
_GEO_LEXICON: Dict[str, Tuple[float, ...]] = {
    "left": (-1, 0, 0, 0, 0, 0),
    "right": (1, 0, 0, 0, 0, 0),
    "above": (0, -1, 0, 0, 0, 0),
    "below": (0, 1, 0, 0, 0, 0),
    "toward": (0, 0, 1, 0, 0, 0),
    "away": (0, 0, -1, 0, 0, 0),
    "larger": (0, 0, 0, 1, 0, 0),
    "smaller": (0, 0, 0, -1, 0, 0),
    "follows": (0, 0, 0, 0, 1, 0),
    "leads": (0, 0, 0, 0, -1, 0),
    "near": (0, 0, 0, 0, 0, 1),
    "far": (0, 0, 0, 0, 0, -1),
}
_GEO_BASIS = 6

_N_FOURIER = 48
_FOURIER_BANDWIDTH = 6.0
_SOFT_COVERAGE = 0.02
_SCALE_TEXT_CONTEXT = 0.03
_SCALE_TEXTURE = 0.2
_SCALE_CONTENT_HASH = 0.01
_SCALE_NAME_HASH = 0.08


def _seeded(label: str) -> np.random.Generator:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "little")))


def identity_color(name: str) -> Tuple[int, int, int]:
    """Deterministic saturated RGB for a category name.

    Shared contract with the synthetic generator: objects drawn in this
    color are recognizable by the mock from the name alone.
    """
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    hue = int.from_bytes(digest[0:2], "little") / 65535.0
    sat = 0.75 + 0.25 * digest[2] / 255.0
    val = 0.8 + 0.2 * digest[3] / 255.0
    r, g, b = colorsys.hsv_to_rgb(hue, sat, val)
    return (int(round(r * 255)), int(round(g * 255)), int(round(b * 255)))


@dataclass(frozen=True)
class EncoderSpec:
    feature_dim: int
    patch_grid: Tuple[int, int]
    input_resolution: int
    text_context_length: int
    token_dim: int = 16

    def __post_init__(self):
        if self.feature_dim < 8:
            raise ValueError("feature_dim must be at least 8")
        rows, cols = self.patch_grid
        if rows < 1 or cols < 1:
            raise ValueError("patch grid must be at least 1x1")
        if self.text_context_length < 1:
            raise ValueError("text_context_length must be positive")

    def fingerprint(self) -> str:
        return (f"d{self.feature_dim}-g{self.patch_grid[0]}x{self.patch_grid[1]}"
                f"-r{self.input_resolution}-c{self.text_context_length}-t{self.token_dim}")


@dataclass
class FrameFeatures:
    """Per-frame output of the visual encoder: one global vector + a patch grid."""

    global_feature: torch.Tensor
    patches: torch.Tensor
    frame_index: int = 0

    def __post_init__(self):
        if self.patches.ndim != 3:
            raise ValueError("patches must be a rows x cols x dim grid")
        if self.global_feature.shape[-1] != self.patches.shape[-1]:
            raise ValueError("global/patch feature dims disagree")


class MockVisionLanguageEncoder:
    """Deterministic frozen encoder; see the module docstring for the design."""

    def __init__(self, spec: EncoderSpec, seed_label: str = "mock-encoder-v1"):
        self.spec = spec
        d = spec.feature_dim
        self._d_id = max((3 * d) // 8, 4)
        self._d_geo = max(d // 4, 2)
        self._d_tex = max(d // 4, 2)
        self._d_hash = d - self._d_id - self._d_geo - self._d_tex
        if self._d_hash < 1:
            raise ValueError(f"feature_dim {d} too small to split into subspaces")
        base = f"{seed_label}:{spec.fingerprint()}"
        rng = _seeded(base + ":color")
        self._w_color = rng.normal(0.0, _FOURIER_BANDWIDTH, (_N_FOURIER, 3))
        self._b_color = rng.uniform(0.0, 2 * np.pi, _N_FOURIER)
        self._w_id = _seeded(base + ":idproj").normal(
            0.0, 1.0 / np.sqrt(self._d_id), (self._d_id, _N_FOURIER))
        q, _ = np.linalg.qr(_seeded(base + ":geo").normal(0, 1, (self._d_geo, self._d_geo)))
        self._w_geo = q[:, :_GEO_BASIS] if self._d_geo >= _GEO_BASIS else _seeded(
            base + ":geo-fallback").normal(0, 1 / np.sqrt(_GEO_BASIS), (self._d_geo, _GEO_BASIS))
        self._w_tex = _seeded(base + ":tex").normal(0.0, 1.0 / np.sqrt(12.0), (self._d_tex, 12))
        self._w_ctx = torch.tensor(
            _seeded(base + ":ctx").normal(0.0, 1.0 / np.sqrt(spec.token_dim),
                                          (d, spec.token_dim)),
            dtype=torch.float32)
        self._pos_mod = torch.tensor(
            _seeded(base + ":pos").uniform(0.5, 1.5, (spec.text_context_length, spec.token_dim)),
            dtype=torch.float32)
        self._token_cache: Dict[str, torch.Tensor] = {}
        self._anchor_cache: Dict[str, np.ndarray] = {}
        self._base = base

    # ------------------------------------------------------------------ visual

    def encode_frame(self, image: np.ndarray, frame_index: int = 0) -> FrameFeatures:
        image = self._check_image(image)
        resized = self._resize(image)
        rows, cols = self.spec.patch_grid
        res = self.spec.input_resolution
        r_edges = np.linspace(0, res, rows + 1).astype(int)
        c_edges = np.linspace(0, res, cols + 1).astype(int)
        patches = np.empty((rows, cols, self.spec.feature_dim), dtype=np.float32)
        for i in range(rows):
            for j in range(cols):
                cell = resized[r_edges[i]:r_edges[i + 1], c_edges[j]:c_edges[j + 1]]
                patches[i, j] = self._region_feature(cell)
        global_feature = self._region_feature(resized)
        return FrameFeatures(
            global_feature=torch.from_numpy(global_feature),
            patches=torch.from_numpy(patches),
            frame_index=frame_index,
        )

    def encode_crop(self, image: np.ndarray, box_px: Sequence[float]) -> torch.Tensor:
        image = self._check_image(image)
        h, w = image.shape[:2]
        x1, y1, x2, y2 = box_px
        if x2 <= x1 or y2 <= y1:
            raise ValueError(f"degenerate crop box {box_px}")
        if x2 <= 0 or y2 <= 0 or x1 >= w or y1 >= h:
            raise ValueError(f"crop box {box_px} lies outside the {w}x{h} image")
        xi1 = int(np.floor(max(x1, 0)))
        yi1 = int(np.floor(max(y1, 0)))
        xi2 = int(np.ceil(min(x2, w)))
        yi2 = int(np.ceil(min(y2, h)))
        if xi2 <= xi1:
            xi2 = xi1 + 1
        if yi2 <= yi1:
            yi2 = yi1 + 1
        crop = image[yi1:yi2, xi1:xi2]
        return torch.from_numpy(self._region_feature(self._resize(crop)))

    def _check_image(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image)
        if image.ndim != 3 or image.shape[2] != 3 or image.shape[0] < 1 or image.shape[1] < 1:
            raise ValueError(f"expected H x W x 3 raster, got shape {image.shape}")
        if image.dtype != np.uint8:
            image = np.clip(image, 0, 255).astype(np.uint8)
        return image

    def _resize(self, image: np.ndarray) -> np.ndarray:
        res = self.spec.input_resolution
        if image.shape[0] == res and image.shape[1] == res:
            return image
        pil = Image.fromarray(image).resize((res, res), Image.BILINEAR)
        return np.asarray(pil)

    def _pixel_codes(self, pixels01: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Per-pixel identity code and saturation gate for an N x 3 array.

        The gate is squared saturation, so dim or gray content is suppressed
        quadratically while saturated palette colors pass nearly untouched.
        """
        phases = pixels01 @ self._w_color.T + self._b_color
        codes = np.cos(phases) / np.sqrt(_N_FOURIER)
        rho = pixels01.max(axis=1) - pixels01.min(axis=1)
        return codes, rho * rho

    def _region_feature(self, region: np.ndarray) -> np.ndarray:
        pixels01 = region.reshape(-1, 3).astype(np.float64) / 255.0
        n_px = pixels01.shape[0]
        codes, gate = self._pixel_codes(pixels01)
        id_raw = (gate[:, None] * codes).sum(axis=0) / (gate.sum() + _SOFT_COVERAGE * n_px)
        id_part = self._w_id @ id_raw

        means = pixels01.mean(axis=0)
        stds = pixels01.std(axis=0)
        hgt, wdt = region.shape[:2]
        ys = (np.arange(hgt) + 0.5) / hgt
        xs = (np.arange(wdt) + 0.5) / wdt
        intens = region.astype(np.float64) / 255.0
        mass = intens.sum(axis=(0, 1)) + 1e-9
        com_x = (intens.sum(axis=0) * xs[:, None]).sum(axis=0) / mass
        com_y = (intens.sum(axis=1) * ys[:, None]).sum(axis=0) / mass
        moments = np.concatenate([means, stds, com_x, com_y])
        tex_part = _SCALE_TEXTURE * (self._w_tex @ moments)

        digest = hashlib.sha256(region.tobytes() + str(region.shape).encode()).digest()
        hash_rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "little")))
        eps = hash_rng.normal(0, 1, self._d_hash)
        eps = _SCALE_CONTENT_HASH * eps / (np.linalg.norm(eps) + 1e-12)

        out = np.zeros(self.spec.feature_dim)
        out[:self._d_id] = id_part
        out[self._d_id + self._d_geo:self._d_id + self._d_geo + self._d_tex] = tex_part
        out[self._d_id + self._d_geo + self._d_tex:] = eps
        return out.astype(np.float32)

    # -------------------------------------------------------------------- text

    def token_embedding(self, name: str) -> torch.Tensor:
        """Embedding-space vector for a discrete token."""
        if name not in self._token_cache:
            vec = _seeded(self._base + ":tok:" + name).normal(
                0, 1.0 / np.sqrt(self.spec.token_dim), self.spec.token_dim)
            self._token_cache[name] = torch.tensor(vec, dtype=torch.float32)
        return self._token_cache[name]

    def _name_anchor(self, name: str) -> np.ndarray:
        if name in self._anchor_cache:
            return self._anchor_cache[name]
        out = np.zeros(self.spec.feature_dim)
        words = [w for w in re.split(r"[^a-z0-9]+", name.lower()) if w]
        geo_words = [w for w in words if w in _GEO_LEXICON]
        if geo_words:
            code = np.zeros(_GEO_BASIS)
            for w in geo_words:
                code += np.asarray(_GEO_LEXICON[w], dtype=np.float64)
            code /= len(geo_words)
            out[self._d_id:self._d_id + self._d_geo] = self._w_geo @ code
        else:
            rgb01 = np.asarray(identity_color(name), dtype=np.float64)[None, :] / 255.0
            codes, gate = self._pixel_codes(rgb01)
            out[:self._d_id] = self._w_id @ (gate[0] * codes[0])
        ename = _seeded(self._base + ":name:" + name).normal(0, 1, self._d_hash)
        ename = _SCALE_NAME_HASH * ename / (np.linalg.norm(ename) + 1e-12)
        out[self._d_id + self._d_geo + self._d_tex:] += ename
        self._anchor_cache[name] = out
        return out

    def encode_text(self, tokens: Sequence[TextToken]) -> torch.Tensor:
        if len(tokens) == 0:
            raise ValueError("empty token sequence")
        if len(tokens) > self.spec.text_context_length:
            raise ValueError(
                f"{len(tokens)} tokens exceed context length {self.spec.text_context_length}")
        dtype = torch.float32
        for tok in tokens:
            if isinstance(tok, torch.Tensor) and tok.dtype == torch.float64:
                dtype = torch.float64
        vecs: List[torch.Tensor] = []
        anchors: List[np.ndarray] = []
        for pos, tok in enumerate(tokens):
            if isinstance(tok, str):
                vecs.append(self.token_embedding(tok).to(dtype) * self._pos_mod[pos].to(dtype))
                anchors.append(self._name_anchor(tok))
            else:
                if tok.shape != (self.spec.token_dim,):
                    raise ValueError(f"continuous token must have dim {self.spec.token_dim}")
                vecs.append(tok.to(dtype) * self._pos_mod[pos].to(dtype))
        h = torch.stack(vecs, dim=0).mean(dim=0)
        out = self._w_ctx.to(dtype) @ h * _SCALE_TEXT_CONTEXT
        if anchors:
            anchor_mean = np.stack(anchors, axis=0).mean(axis=0)
            out = out + torch.tensor(anchor_mean, dtype=dtype)
        return out

    # ------------------------------------------------------------------ frozen

    def fixed_tensors(self) -> List[torch.Tensor]:
        return [self._w_ctx, self._pos_mod]

    def state_checksum(self) -> str:
        h = hashlib.sha256()
        for arr in (self._w_color, self._b_color, self._w_id, self._w_geo, self._w_tex):
            h.update(np.ascontiguousarray(arr).tobytes())
        for t in self.fixed_tensors():
            h.update(t.detach().numpy().tobytes())
        return h.hexdigest()


class ClipVisionLanguageEncoder:
    """Adapter for a real CLIP-family backbone; loaded lazily and optional.

    Only constructed when ``encoder.kind = clip``; its import failure must
    never break mock-based runs.
    """

    def __init__(self, model_name: str = "ViT-L/14@336px", device: str = "cpu"):
        try:
            import clip  # type: ignore
        except ImportError as exc:  # pragma: no cover - optional dependency
            raise RuntimeError(
                "clip backbone requested but the clip package is not installed") from exc
        self._clip = clip
        self.model, _ = clip.load(model_name, device=device)
        self.model.eval()
        self.device = device
        visual = self.model.visual
        res = visual.input_resolution
        grid = res // visual.conv1.kernel_size[0]
        self.spec = EncoderSpec(
            feature_dim=self.model.text_projection.shape[1],
            patch_grid=(grid, grid),
            input_resolution=res,
            text_context_length=self.model.context_length,
            token_dim=self.model.token_embedding.embedding_dim,
        )

    # pragma: no cover - exercised only with the optional backbone installed
    def encode_frame(self, image: np.ndarray, frame_index: int = 0) -> FrameFeatures:
        raise NotImplementedError(
            "patch-grid extraction for the real backbone is an integration-time "
            "extension point; desk-scale runs use the mock encoder")


def build_encoder(config) -> MockVisionLanguageEncoder:
    kind = config["encoder.kind"]
    if kind == "mock":
        side = config["encoder.patch_grid"]
        spec = EncoderSpec(
            feature_dim=config["encoder.dim"],
            patch_grid=(side, side),
            input_resolution=config["encoder.resolution"],
            text_context_length=config["encoder.context_length"],
            token_dim=config["encoder.token_dim"],
        )
        return MockVisionLanguageEncoder(spec)
    if kind == "clip":
        return ClipVisionLanguageEncoder()
    raise ValueError(f"unknown encoder kind {kind!r}")


class FeatureCache:
    """Content-addressed on-disk cache of frame features.

    Safe because the encoder is frozen: a key derives from the encoder
    fingerprint and the raw image bytes, so entries can never go stale.
    The cache directory comes from the EOV_CACHE environment variable.
    """

    def __init__(self, root: str):
        self.root = root
        os.makedirs(root, exist_ok=True)

    @staticmethod
    def from_env() -> Optional["FeatureCache"]:
        root = os.environ.get("EOV_CACHE")
        return FeatureCache(root) if root else None

    def key_for(self, encoder, image: np.ndarray) -> str:
        h = hashlib.sha256()
        h.update(encoder.spec.fingerprint().encode())
        h.update(str(np.asarray(image).shape).encode())
        h.update(np.ascontiguousarray(image).tobytes())
        return h.hexdigest()

    def _path(self, key: str) -> str:
        return os.path.join(self.root, key + ".npz")

    def get(self, key: str) -> Optional[FrameFeatures]:
        path = self._path(key)
        if not os.path.exists(path):
            return None
        data = np.load(path)
        return FrameFeatures(
            global_feature=torch.from_numpy(data["global"]),
            patches=torch.from_numpy(data["patches"]),
            frame_index=int(data["frame_index"]),
        )

    def put(self, key: str, feats: FrameFeatures) -> None:
        np.savez(
            self._path(key),
            **{"global": feats.global_feature.detach().numpy(),
               "patches": feats.patches.detach().numpy(),
               "frame_index": np.asarray(feats.frame_index)},
        )
