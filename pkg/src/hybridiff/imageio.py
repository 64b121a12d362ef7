"""Binary PPM (P6) images, optional PNG, and key-value sidecar files."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def write_ppm(path, image: np.ndarray) -> None:
    """``image`` is (3, H, W) uint8."""
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[0] != 3:
        raise ValueError("expected a (3, H, W) uint8 image")
    _, h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P6" or int(fields[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PPM")
    w, h = int(fields[1]), int(fields[2])
    raw = np.frombuffer(data[pos + 1:pos + 1 + 3 * w * h], dtype=np.uint8)
    return raw.reshape(h, w, 3).transpose(2, 0, 1).copy()


def write_png(path, image: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(image).transpose(1, 2, 0)).save(path, format="PNG")


def write_sidecar(path, meta: dict) -> None:
    with open(path, "w") as f:
        for k, v in meta.items():
            f.write(f"{k} = {v}\n")


def read_sidecar(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


def to_latent(images: np.ndarray):
    """uint8 images -> float tensor in [-1, 1] (the identity pixel codec)."""
    import torch

    return torch.as_tensor(np.asarray(images), dtype=torch.float32) / 127.5 - 1.0


def from_latent(latent) -> np.ndarray:
    x = (latent.detach().double().clamp(-1, 1) + 1) * 127.5
    return x.round().to(dtype=__import__("torch").uint8).numpy()
