"""Pluggable exemplar editor: HTTP client for an external instruction-driven
editor plus deterministic built-in mocks for tests and offline runs.

Wire protocol: POST {endpoint}/edit with a JSON body
{"image_png_base64", "instruction", "image_guidance", "text_guidance",
"steps", "seed"}; success returns {"image_png_base64"}, failure a non-2xx
status with {"error": text}.
"""

from __future__ import annotations

import base64
import hashlib
import io
import time
from dataclasses import dataclass

import numpy as np
import requests
from PIL import Image as PILImage

SEPIA_MATRIX = np.array([[0.393, 0.769, 0.189],
                         [0.349, 0.686, 0.168],
                         [0.272, 0.534, 0.131]])
DEFAULT_TIMEOUT = 600.0
TRANSPORT_RETRIES = 2


class EditorError(RuntimeError):
    """Editing failed: transport problem, server error, or bad response."""


class EditorTimeout(EditorError):
    pass


@dataclass
class EditRequest:
    image: np.ndarray
    instruction: str
    seed: int
    image_guidance: float = 1.5
    text_guidance: float = 3.5
    steps: int = 100

    def validate(self) -> None:
        if self.image_guidance <= 0 or self.text_guidance <= 0:
            raise ValueError("guidance scales must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


@dataclass
class EditResponse:
    image: np.ndarray
    latency: float


def encode_image_png(image: np.ndarray) -> str:
    data = np.rint(np.clip(image, 0, 1) * 255).astype(np.uint8)
    buf = io.BytesIO()
    PILImage.fromarray(data, mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_image_png(payload: str) -> np.ndarray:
    with PILImage.open(io.BytesIO(base64.b64decode(payload))) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def edit_remote(endpoint: str, req: EditRequest, timeout: float = DEFAULT_TIMEOUT) -> EditResponse:
    """Send one edit request, retrying twice on transient transport failure.

    The request image is never mutated; the response image must match its
    resolution.
    """
    req.validate()
    body = {
        "image_png_base64": encode_image_png(req.image),
        "instruction": req.instruction,
        "image_guidance": req.image_guidance,
        "text_guidance": req.text_guidance,
        "steps": req.steps,
        "seed": req.seed,
    }
    url = endpoint.rstrip("/") + "/edit"
    start = time.monotonic()
    last_exc: Exception | None = None
    for _ in range(1 + TRANSPORT_RETRIES):
        try:
            resp = requests.post(url, json=body, timeout=timeout)
        except requests.Timeout as exc:
            last_exc = EditorTimeout(f"edit request to {url} timed out after {timeout}s")
            last_exc.__cause__ = exc
            continue
        except requests.RequestException as exc:
            last_exc = EditorError(f"edit request to {url} failed: {exc}")
            last_exc.__cause__ = exc
            continue
        if resp.status_code != 200:
            try:
                message = resp.json().get("error", resp.text)
            except ValueError:
                message = resp.text
            raise EditorError(f"editor returned status {resp.status_code}: {message}")
        try:
            image = decode_image_png(resp.json()["image_png_base64"])
        except (ValueError, KeyError) as exc:
            raise EditorError(f"malformed editor response: {exc}") from exc
        if image.shape[:2] != np.asarray(req.image).shape[:2]:
            raise EditorError(
                f"resolution mismatch: sent {np.asarray(req.image).shape[:2]}, got {image.shape[:2]}")
        return EditResponse(image=image, latency=time.monotonic() - start)
    raise last_exc


def _posterize(image: np.ndarray, levels: int) -> np.ndarray:
    if levels < 2:
        raise ValueError("posterize needs at least 2 levels")
    return np.rint(image * (levels - 1)) / (levels - 1)


def _content_noise(image: np.ndarray, seed: int, amplitude: float) -> np.ndarray:
    """Deterministic per-image noise: varies with the input pixels even for a
    fixed seed, the way diffusion edits drift across frames."""
    digest = hashlib.sha256(np.ascontiguousarray(
        np.rint(image * 255).astype(np.uint8)).tobytes()).digest()
    mix = int.from_bytes(digest[:8], "little")
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, mix]))
    return np.clip(image + rng.normal(0.0, amplitude, size=image.shape), 0.0, 1.0)


def edit_mock(kind: str, req: EditRequest) -> EditResponse:
    """Deterministic built-in editors.

    Kinds: "identity", "sepia" (fixed linear color matrix, clamped),
    "posterize:K" (each channel quantized to K levels), and
    "noisy:<base>:<amplitude>" wrapping a base kind with content-seeded
    noise. Instruction text is ignored; responses are pure in the request.
    """
    req.validate()
    start = time.monotonic()
    image = np.array(req.image, dtype=np.float64, copy=True)
    parts = kind.split(":")
    name = parts[0]
    if name == "identity":
        out = image
    elif name == "sepia":
        out = np.clip(image @ SEPIA_MATRIX.T, 0.0, 1.0)
    elif name == "posterize":
        levels = int(parts[1]) if len(parts) > 1 else 4
        out = _posterize(image, levels)
    elif name == "noisy":
        if len(parts) < 2:
            raise ValueError("noisy mock needs a base kind, e.g. noisy:sepia:0.05")
        amplitude = float(parts[2]) if len(parts) > 2 else 0.05
        base = edit_mock(parts[1], req).image
        out = _content_noise(base, req.seed, amplitude)
    else:
        raise ValueError(f"unknown mock editor kind: {kind!r}")
    return EditResponse(image=out, latency=time.monotonic() - start)


class CountingEditor:
    """Wraps any editor callable and records how often it is invoked."""

    def __init__(self, inner):
        self.inner = inner
        self.calls = 0

    def __call__(self, req: EditRequest) -> EditResponse:
        self.calls += 1
        return self.inner(req)


def make_editor(spec: str, timeout: float = DEFAULT_TIMEOUT):
    """Editor callable from a spec string: "mock:<kind>" or an http endpoint."""
    if spec.startswith("mock:"):
        kind = spec[len("mock:"):]
        return lambda req: edit_mock(kind, req)
    if spec.startswith("http://") or spec.startswith("https://"):
        return lambda req: edit_remote(spec, req, timeout=timeout)
    raise ValueError(f"editor spec must be 'mock:<kind>' or an http(s) endpoint, got {spec!r}")
