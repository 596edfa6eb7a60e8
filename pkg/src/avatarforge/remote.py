"""Wire-protocol client for out-of-process noise-prediction services.

POST {endpoint}/v1/predict_noise with JSON:
  {"prompt": str, "t": int, "shape": [C, h, w],
   "z_t": base64 little-endian float32, "eps": base64 float32 (optional),
   "seed": int}
Response: {"eps_hat": base64 float32, "shape": [C, h, w]}.

Transport failures are retried twice; any HTTP error status, malformed
payload, or shape mismatch raises ProviderError.
"""

from __future__ import annotations

import base64

import numpy as np
import requests

from .errors import ProviderError
from .guidance import LatentImage

PREDICT_PATH = "/v1/predict_noise"
HEALTH_PATH = "/v1/health"


def array_to_b64(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f4").tobytes()).decode("ascii")


def b64_to_array(data: str, shape: tuple[int, ...]) -> np.ndarray:
    try:
        raw = base64.b64decode(data, validate=True)
    except Exception as exc:
        raise ProviderError(f"malformed base64 payload: {exc}") from exc
    count = int(np.prod(shape))
    if len(raw) != count * 4:
        raise ProviderError(f"payload has {len(raw)} bytes, expected {count * 4}")
    return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)


class RemoteProvider:
    def __init__(self, endpoint: str, timeout: float = 30.0, seed: int = 0,
                 session: requests.Session | None = None):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.seed = seed
        self.session = session or requests.Session()

    def predict_noise(self, z_t: LatentImage, prompt: str, t: int,
                      eps: np.ndarray | None = None) -> np.ndarray:
        payload = {
            "prompt": prompt,
            "t": int(t),
            "shape": list(z_t.z.shape),
            "z_t": array_to_b64(z_t.z),
            "seed": int(self.seed),
        }
        if eps is not None:
            payload["eps"] = array_to_b64(eps)

        url = self.endpoint + PREDICT_PATH
        last_exc: Exception | None = None
        for _ in range(3):  # two retries on transport failure
            try:
                resp = self.session.post(url, json=payload, timeout=self.timeout)
                break
            except requests.RequestException as exc:
                last_exc = exc
        else:
            raise ProviderError(f"transport failure after retries: {last_exc}")

        if resp.status_code != 200:
            raise ProviderError(f"service returned HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            body = resp.json()
        except ValueError as exc:
            raise ProviderError(f"malformed JSON response: {exc}") from exc
        if "eps_hat" not in body or "shape" not in body:
            raise ProviderError("response missing eps_hat/shape")
        shape = tuple(int(d) for d in body["shape"])
        if shape != z_t.z.shape:
            raise ProviderError(f"response shape {shape} != request shape {z_t.z.shape}")
        return b64_to_array(body["eps_hat"], shape)


def remote_provider(endpoint: str, timeout: float = 30.0, seed: int = 0) -> RemoteProvider:
    return RemoteProvider(endpoint, timeout=timeout, seed=seed)
