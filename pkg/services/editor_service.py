"""
Editor Service - HTTP client for external 2D editors and inpainters.

Wire protocol (JSON bodies, images as base64 PNG):
    POST /v1/edit     {instruction, current_png, original_png} -> {edited_png}
    POST /v1/inpaint  {image_png, mask_png}                   -> {inpainted_png}
Optional header: Authorization: Bearer <token>.
"""
import base64
import json
import logging
import os
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import requests

from field_engine.idu import EditInstruction
from field_engine.scene import MaskImage
from services.dataset_service import decode_png, encode_mask_png, encode_png, to_uint8

logger = logging.getLogger(__name__)

BACKOFF_BASE = 0.5
BACKOFF_FACTOR = 2.0
UNMASKED_TOLERANCE = 1.0 / 255.0


class RemoteError(RuntimeError):
    pass


class RemoteRejected(RemoteError):
    def __init__(self, status: int, body: str):
        super().__init__(f"remote rejected request: HTTP {status}: {body[:200]}")
        self.status = status
        self.body = body


class RemoteUnavailable(RemoteError):
    def __init__(self, url: str, attempts: int, cause: Exception):
        super().__init__(f"remote unavailable at {url} after {attempts} attempts: {cause}")
        self.attempts = attempts


class ProtocolViolation(RemoteError):
    pass


@dataclass
class RemoteEndpoint:
    base_url: str
    timeout: float = 30.0
    max_retries: int = 3
    auth_token: Optional[str] = None

    def __post_init__(self) -> None:
        if self.timeout <= 0:
            raise ValueError("endpoint timeout must be > 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.auth_token is None:
            self.auth_token = os.getenv("RADIANT_EDITOR_TOKEN") or None
        self.base_url = self.base_url.rstrip("/")

    def headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.auth_token:
            headers["Authorization"] = f"Bearer {self.auth_token}"
        return headers


def png_b64(rgb: np.ndarray) -> str:
    return base64.b64encode(encode_png(rgb)).decode("ascii")


def decode_b64_png(value, field: str) -> np.ndarray:
    if not isinstance(value, str):
        raise ProtocolViolation(f"response field '{field}' missing or not a string")
    try:
        rgb, _ = decode_png(base64.b64decode(value, validate=True))
    except Exception as e:
        raise ProtocolViolation(f"response field '{field}' is not a base64 PNG: {e}") from e
    return rgb


def _post(endpoint: RemoteEndpoint, route: str, payload: dict, sleep: Callable[[float], None] = time.sleep) -> dict:
    """POST with retries on connection failures and timeouts; non-200 answers fail immediately."""
    url = f"{endpoint.base_url}{route}"
    body = json.dumps(payload).encode("utf-8")
    attempts = endpoint.max_retries + 1
    last_error = None

    for attempt in range(attempts):
        try:
            response = requests.post(url, data=body, headers=endpoint.headers(), timeout=endpoint.timeout)
        except (requests.ConnectionError, requests.Timeout) as e:
            last_error = e
            logger.warning(f"⚠️ {route} attempt {attempt + 1}/{attempts} failed: {e}")
            if attempt < attempts - 1:
                sleep(BACKOFF_BASE * BACKOFF_FACTOR ** attempt)
            continue

        if response.status_code != 200:
            raise RemoteRejected(response.status_code, response.text)
        try:
            answer = response.json()
        except ValueError as e:
            raise ProtocolViolation(f"{route}: response is not JSON") from e
        if not isinstance(answer, dict):
            raise ProtocolViolation(f"{route}: response must be a JSON object, got {type(answer).__name__}")
        return answer

    raise RemoteUnavailable(url, attempts, last_error)


def remote_edit(endpoint: RemoteEndpoint, current_rgb: np.ndarray, original_rgb: np.ndarray,
                instruction: EditInstruction, sleep: Callable[[float], None] = time.sleep) -> np.ndarray:
    if current_rgb.shape != original_rgb.shape:
        raise ValueError(f"current {current_rgb.shape} and original {original_rgb.shape} images differ in size")
    payload = {
        "instruction": instruction.text,
        "current_png": png_b64(current_rgb),
        "original_png": png_b64(original_rgb),
    }
    edited = decode_b64_png(_post(endpoint, "/v1/edit", payload, sleep).get("edited_png"), "edited_png")
    if edited.shape != current_rgb.shape:
        raise ProtocolViolation(f"edited image is {edited.shape[1]}x{edited.shape[0]}, "
                                f"expected {current_rgb.shape[1]}x{current_rgb.shape[0]}")
    return edited


def remote_inpaint(endpoint: RemoteEndpoint, rgb: np.ndarray, mask: MaskImage,
                   sleep: Callable[[float], None] = time.sleep) -> np.ndarray:
    if rgb.shape[:2] != mask.data.shape:
        raise ValueError(f"image {rgb.shape[:2]} and mask {mask.data.shape} differ in size")
    payload = {
        "image_png": png_b64(rgb),
        "mask_png": base64.b64encode(encode_mask_png(mask)).decode("ascii"),
    }
    inpainted = decode_b64_png(_post(endpoint, "/v1/inpaint", payload, sleep).get("inpainted_png"), "inpainted_png")
    if inpainted.shape != rgb.shape:
        raise ProtocolViolation(f"inpainted image is {inpainted.shape[1]}x{inpainted.shape[0]}, "
                                f"expected {rgb.shape[1]}x{rgb.shape[0]}")

    # compare against what was actually sent, i.e. the 8-bit quantised input
    sent = to_uint8(rgb) / 255.0
    unmasked = mask.data == 0
    drift = np.abs(inpainted - sent)[unmasked]
    if drift.size and drift.max() > UNMASKED_TOLERANCE + 1e-12:
        raise ProtocolViolation(f"inpainter modified unmasked pixels (max deviation {drift.max():.4f})")
    return inpainted


class RemoteEditor:
    """Editor backed by a remote /v1/edit endpoint."""

    def __init__(self, endpoint: RemoteEndpoint):
        self.endpoint = endpoint

    def edit(self, current_rgb, original_rgb, instruction):
        return remote_edit(self.endpoint, current_rgb, original_rgb, instruction)


class RemoteInpainter:
    def __init__(self, endpoint: RemoteEndpoint):
        self.endpoint = endpoint

    def inpaint(self, rgb: np.ndarray, mask: MaskImage) -> np.ndarray:
        return remote_inpaint(self.endpoint, rgb, mask)
