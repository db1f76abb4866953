"""The density field: image-conditioned features decoded to density at 3D points.

A feature extractor produces a pixel-aligned feature map from the input
image (either a small conv encoder-decoder or a directly learnable grid
for single-scene fits). Density at a world point is obtained by
projecting the point into the input camera, sampling the feature map
with border clamping, and decoding (feature, encoded distance, encoded
pixel) through a small MLP. The field predicts density only - color is
never produced here.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import (Camera, ImageGrid, N_FREQS, encode_array,
                       normalize_inverse_depth, project_points)


def _uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


@dataclass(frozen=True)
class ModelSpec:
    """Hyperparameters needed to rebuild a model skeleton."""

    mode: str = "direct"        # "conv" | "direct"
    channels: int = 64          # feature channels C
    hidden: int = 64            # MLP hidden width
    width: int = 64             # input image / feature map width
    height: int = 48
    n_freq: int = N_FREQS
    activation: str = "softplus"  # density activation: "softplus" | "relu"

    def to_json(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json(d: dict) -> "ModelSpec":
        return ModelSpec(**d)


class FeatureExtractor:
    """Produces the pixel-aligned feature map F (C, H, W).

    conv mode: 3 stride-2 conv layers (3 -> 16 -> 32 -> 64) and 3 stride-2
    transposed-conv layers (64 -> 64 -> C -> C) with skip connections from
    the matching encoder levels. direct mode: the feature map itself is
    the learnable parameter (single-scene fitting, fast tests).
    """

    ENC_CHANNELS = (16, 32, 64)

    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        self.spec = spec
        self.params: dict[str, Tensor] = {}
        if spec.mode == "direct":
            grid = np.zeros((spec.channels, spec.height, spec.width), np.float32)
            self.params["grid"] = Tensor(grid, requires_grad=True)
        elif spec.mode == "conv":
            if spec.height % 4 or spec.width % 4:
                raise ValueError(
                    f"conv extractor: resolution {spec.height}x{spec.width} "
                    "must be divisible by 4")
            c1, c2, c3 = self.ENC_CHANNELS
            c = spec.channels
            self._add(rng, "enc1", c1, 3)
            self._add(rng, "enc2", c2, c1)
            self._add(rng, "enc3", c3, c2)
            self._add(rng, "dec1", 64, c3)
            self._add(rng, "dec2", c, 64 + c2)
            self._add(rng, "dec3", c, c + c1)
        else:
            raise ValueError(f"unknown extractor mode {spec.mode!r}")

    def _add(self, rng, name: str, cout: int, cin: int) -> None:
        self.params[f"{name}.w"] = Tensor(
            _uniform_init(rng, (cout, cin, 3, 3), cin * 9), requires_grad=True)
        self.params[f"{name}.b"] = Tensor(
            np.zeros(cout, np.float32), requires_grad=True)

    def forward(self, image: ImageGrid) -> Tensor:
        """Feature map (C, H, W) for a 3 x H x W input image in [0, 1]."""
        if self.spec.mode == "direct":
            return self.params["grid"]
        if image.channels != 3:
            raise ValueError(f"conv extractor: expected 3 channels, got {image.channels}")
        if (image.height, image.width) != (self.spec.height, self.spec.width):
            raise ValueError(
                f"conv extractor: built for {self.spec.height}x{self.spec.width}, "
                f"got {image.height}x{image.width}")
        p = self.params
        x = Tensor(image.array.transpose(2, 0, 1))  # (3, H, W)
        e1 = ad.relu(ad.conv2d(x, p["enc1.w"], p["enc1.b"], stride=2))
        e2 = ad.relu(ad.conv2d(e1, p["enc2.w"], p["enc2.b"], stride=2))
        e3 = ad.relu(ad.conv2d(e2, p["enc3.w"], p["enc3.b"], stride=2))
        d1 = ad.relu(ad.transposed_conv2d(e3, p["dec1.w"], p["dec1.b"],
                                          out_hw=e2.shape[1:]))
        d2 = ad.relu(ad.transposed_conv2d(ad.concat([d1, e2], axis=0),
                                          p["dec2.w"], p["dec2.b"],
                                          out_hw=e1.shape[1:]))
        return ad.transposed_conv2d(ad.concat([d2, e1], axis=0),
                                    p["dec3.w"], p["dec3.b"],
                                    out_hw=(image.height, image.width))


class DecoderMlp:
    """Two 64-wide fully connected layers plus a scalar density head.

    Input width is C + |gamma(d)| + |gamma(u')|. The head bias starts at
    -1 so the initial field is mostly transparent (softplus(-1) ~ 0.31)
    instead of an opaque first sample swallowing all gradient.
    """

    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        self.spec = spec
        enc = 1 + 2 * spec.n_freq
        self.in_width = spec.channels + 3 * enc
        h = spec.hidden
        self.params = {
            "fc1.w": Tensor(_uniform_init(rng, (self.in_width, h), self.in_width),
                            requires_grad=True),
            "fc1.b": Tensor(np.zeros(h, np.float32), requires_grad=True),
            "fc2.w": Tensor(_uniform_init(rng, (h, h), h), requires_grad=True),
            "fc2.b": Tensor(np.zeros(h, np.float32), requires_grad=True),
            "head.w": Tensor(_uniform_init(rng, (h, 1), h), requires_grad=True),
            "head.b": Tensor(np.full(1, -1.0, np.float32), requires_grad=True),
        }

    def forward(self, x: Tensor) -> Tensor:
        """(n, in_width) -> nonnegative densities (n,)."""
        p = self.params
        h = ad.relu(ad.add_bias(ad.matmul(x, p["fc1.w"]), p["fc1.b"]))
        h = ad.relu(ad.add_bias(ad.matmul(h, p["fc2.w"]), p["fc2.b"]))
        raw = ad.add_bias(ad.matmul(h, p["head.w"]), p["head.b"])
        act = ad.softplus if self.spec.activation == "softplus" else ad.relu
        return ad.reshape(act(raw), (x.shape[0],))


class DensityModel:
    """Extractor + MLP + the cached feature map for the current input frame."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.spec = spec
        self.extractor = FeatureExtractor(spec, rng)
        self.mlp = DecoderMlp(spec, rng)
        self.input_camera: Camera | None = None
        self.feature_map: Tensor | None = None
        self._input_image: ImageGrid | None = None

    # -- parameters ---------------------------------------------------------

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = [(f"extractor.{k}", v) for k, v in self.extractor.params.items()]
        out += [(f"mlp.{k}", v) for k, v in self.mlp.params.items()]
        return out

    def params(self) -> list[Tensor]:
        return [t for _, t in self.named_params()]

    # -- feature cache ------------------------------------------------------

    def set_input(self, image: ImageGrid, camera: Camera) -> Tensor:
        """Extract (and cache) features for a new input frame."""
        self.input_camera = camera
        self._input_image = image
        self.feature_map = self.extractor.forward(image)
        return self.feature_map

    def refresh_features(self) -> None:
        """Rebuild the feature graph for the cached input (new training step)."""
        if self._input_image is None:
            raise RuntimeError("density model: no input frame set")
        self.feature_map = self.extractor.forward(self._input_image)

    # -- density queries ----------------------------------------------------

    def density_graph(self, points: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """Differentiable densities for (n, 3) world points.

        Returns (sigma (n,), outside_input_frustum (n,) bool). Every point
        is answerable: features clamp to the frustum border, and the flag
        carries the out-of-frustum information for the invalid-ray policy.
        """
        if self.feature_map is None or self.input_camera is None:
            raise RuntimeError("density model: call set_input first")
        cam = self.input_camera
        uv, _, in_frustum = project_points(cam, points)
        uv_c = np.clip(uv, -1.0, 1.0)
        feats = ad.bilinear_sample_diff(self.feature_map, uv_c)  # (n, C)
        d = np.linalg.norm(points - cam.center, axis=1)
        d_norm = np.clip(normalize_inverse_depth(d, cam.z_near, cam.z_far), -1.0, 1.0)
        enc = np.concatenate([encode_array(d_norm[:, None], self.spec.n_freq),
                              encode_array(uv_c, self.spec.n_freq)], axis=1)
        x = ad.concat([feats, Tensor(enc.astype(np.float32))], axis=1)
        return self.mlp.forward(x), ~in_frustum

    def density_values(self, points: np.ndarray, chunk: int = 65536) -> np.ndarray:
        """Densities as plain numpy, chunked for large query sets."""
        points = np.atleast_2d(points)
        out = np.empty(points.shape[0], np.float32)
        for lo in range(0, points.shape[0], chunk):
            sig, _ = self.density_graph(points[lo:lo + chunk])
            out[lo:lo + chunk] = sig.data
        return out

    def eval_density(self, x) -> float:
        """Density (1/m) at a single world point."""
        return float(self.density_values(np.asarray(x, np.float64)[None, :])[0])


def extract_features(model: DensityModel, image: ImageGrid) -> Tensor:
    """Feature map for ``image`` using the model's current camera."""
    if model.input_camera is None:
        raise RuntimeError("density model: input camera not set")
    return model.set_input(image, model.input_camera)
