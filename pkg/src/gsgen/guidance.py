"""DDPM noise schedule, score providers and score-distillation gradients."""
from __future__ import annotations

import socket
import socketserver
import struct
import threading
from dataclasses import dataclass
from typing import Any, Callable, Optional, Protocol, Union

import numpy as np


@dataclass
class NoiseSchedule:
    betas: np.ndarray
    alpha_bars: np.ndarray
    t_range_frac: tuple[float, float] = (0.02, 0.98)

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal level at step t in [0, T]; t = 0 is the clean sample."""
        if not 0 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T}]")
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def weight(self, t: int) -> float:
        return 1.0 - self.alpha_bar(t)

    def t_bounds(self) -> tuple[int, int]:
        lo, hi = self.t_range_frac
        return max(1, int(round(lo * self.T))), max(1, int(round(hi * self.T)))

    def sample_t(self, rng: np.random.Generator) -> int:
        lo, hi = self.t_bounds()
        return int(rng.integers(lo, hi + 1))


def ddpm_schedule(T: int = 1000, beta_min: float = 1e-4, beta_max: float = 2e-2,
                  t_range_frac=(0.02, 0.98)) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_min <= beta_max < 1:
        raise ValueError("need 0 < beta_min <= beta_max < 1")
    betas = np.linspace(beta_min, beta_max, T) if T > 1 else np.array([beta_min])
    return NoiseSchedule(betas=betas, alpha_bars=np.cumprod(1.0 - betas), t_range_frac=tuple(t_range_frac))


def add_noise(x: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    if np.shape(eps) != np.shape(x):
        raise ValueError("noise must match the sample shape")
    ab = schedule.alpha_bar(t)
    return np.sqrt(ab) * x + np.sqrt(1.0 - ab) * eps


class ScoreProvider(Protocol):
    def predict_noise(self, x_t: np.ndarray, t: int, condition: Any = None) -> np.ndarray: ...


@dataclass
class Condition:
    """Opaque conditioning token plus the view it was rendered from (None for point sets)."""

    token: Any = None
    camera: Any = None


class NullProvider:
    """Predicts the injected noise exactly, so every SDS gradient is zero."""

    def predict_noise(self, x_t, t, condition=None):
        raise RuntimeError("NullProvider is resolved inside the SDS helpers")


class DiracImageOracle:
    """Exact denoiser for a point-mass image distribution at x*.

    ``target`` is an image or a callable(camera) -> image for per-view targets.
    """

    def __init__(self, target: Union[np.ndarray, Callable], schedule: NoiseSchedule):
        self.target = target
        self.schedule = schedule

    def target_for(self, condition) -> np.ndarray:
        if callable(self.target):
            return self.target(getattr(condition, "camera", None))
        return self.target

    def predict_noise(self, x_t, t, condition=None):
        ab = self.schedule.alpha_bar(t)
        return (x_t - np.sqrt(ab) * self.target_for(condition)) / np.sqrt(1.0 - ab)


class DiracPointOracle:
    """Exact denoiser for index-aligned target positions p* (normalized space)."""

    def __init__(self, target: np.ndarray, schedule: NoiseSchedule):
        self.target = np.asarray(target, dtype=np.float64)
        self.schedule = schedule

    def predict_noise(self, p_t, t, condition=None):
        if p_t.shape != self.target.shape:
            raise ValueError(f"point set shape {p_t.shape} does not match oracle target {self.target.shape}")
        ab = self.schedule.alpha_bar(t)
        return (p_t - np.sqrt(ab) * self.target) / np.sqrt(1.0 - ab)


def _residual(provider, x, t, eps, schedule, condition):
    if isinstance(provider, NullProvider) or provider is None:
        return np.zeros_like(x, dtype=np.float64)
    x_t = add_noise(np.asarray(x, dtype=np.float64), t, eps, schedule)
    eps_hat = np.asarray(provider.predict_noise(x_t, t, condition), dtype=np.float64)
    if eps_hat.shape != np.shape(x):
        raise ValueError(f"provider returned shape {eps_hat.shape}, expected {np.shape(x)}")
    return eps_hat - eps


def sds_image_grad(provider, x: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule,
                   condition=None, weight: Optional[Callable[[int], float]] = None) -> np.ndarray:
    """w(t) * (eps_hat(x_t) - eps): the per-pixel signal fed to the renderer's backward pass."""
    lo, hi = schedule.t_bounds()
    if not lo <= t <= hi:
        raise ValueError(f"timestep {t} outside sampling window [{lo}, {hi}]")
    w = schedule.weight(t) if weight is None else weight(t)
    return w * _residual(provider, x, t, eps, schedule, condition)


def sds_point_grad(provider, positions: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule,
                   condition=None, weight: Optional[Callable[[int], float]] = None) -> np.ndarray:
    """w_P(t) * (eps_hat_P(p_t) - eps_P), applied directly to normalized positions."""
    if np.shape(positions)[-1] != 3:
        raise ValueError("positions must be N x 3")
    w = schedule.weight(t) if weight is None else weight(t)
    return w * _residual(provider, positions, t, eps, schedule, condition)


# --- external provider wire format -------------------------------------------
# frame: uint32 little-endian byte length, then body.
# request body: uint8 kind (0 image, 1 points), int32 t, uint32 ndim, ndim x uint32 shape, float32 payload
# response body: float32 payload with the request's shape
KIND_IMAGE, KIND_POINTS = 0, 1


def _recv_exact(sock, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("score server closed the connection")
        buf.extend(chunk)
    return bytes(buf)


def encode_request(kind: int, t: int, x: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(x, dtype="<f4")
    head = struct.pack("<BiI", kind, t, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    body = head + arr.tobytes()
    return struct.pack("<I", len(body)) + body


def decode_request(body: bytes) -> tuple[int, int, np.ndarray]:
    kind, t, ndim = struct.unpack_from("<BiI", body, 0)
    off = struct.calcsize("<BiI")
    shape = struct.unpack_from(f"<{ndim}I", body, off)
    off += 4 * ndim
    x = np.frombuffer(body, dtype="<f4", offset=off).reshape(shape)
    return kind, t, x


def read_frame(sock) -> bytes:
    (length,) = struct.unpack("<I", _recv_exact(sock, 4))
    return _recv_exact(sock, length)


class ExternalScoreProvider:
    """Client that forwards noise-prediction requests to a local score server."""

    def __init__(self, host: str = "127.0.0.1", port: int = 7860, kind: int = KIND_IMAGE, timeout: float = 60.0):
        self.address = (host, port)
        self.kind = kind
        self.timeout = timeout

    def predict_noise(self, x_t, t, condition=None):
        with socket.create_connection(self.address, timeout=self.timeout) as sock:
            sock.sendall(encode_request(self.kind, int(t), x_t))
            body = read_frame(sock)
        out = np.frombuffer(body, dtype="<f4")
        if out.size != np.size(x_t):
            raise ValueError("score server returned a payload of the wrong size")
        return out.reshape(np.shape(x_t)).astype(np.float64)


def serve_provider(image_provider=None, point_provider=None, host: str = "127.0.0.1", port: int = 0):
    """Start a background score server; returns (server, port). Call server.shutdown() to stop."""

    class Handler(socketserver.BaseRequestHandler):
        def handle(self):
            kind, t, x = decode_request(read_frame(self.request))
            provider = image_provider if kind == KIND_IMAGE else point_provider
            eps_hat = np.ascontiguousarray(provider.predict_noise(x.astype(np.float64), t), dtype="<f4")
            payload = eps_hat.tobytes()
            self.request.sendall(struct.pack("<I", len(payload)) + payload)

    server = socketserver.ThreadingTCPServer((host, port), Handler)
    server.daemon_threads = True
    threading.Thread(target=server.serve_forever, daemon=True).start()
    return server, server.server_address[1]
