"""
Loopback reference server for the editor wire protocol.

Implements identity edits, "recolor r g b lambda" edits and mean-fill
inpainting on 127.0.0.1; used by tests and as a template for real model servers.

    python -m services.loopback_server --port 8600 [--token SECRET]
"""
import argparse
import base64
import binascii
import logging
import os
import threading
from typing import Optional

import numpy as np
from dotenv import load_dotenv
from flask import Flask, jsonify, request
from werkzeug.serving import make_server

from services.dataset_service import decode_mask_png, decode_png, encode_png

logger = logging.getLogger(__name__)

HOST = "127.0.0.1"
DEFAULT_PORT = 8600


class _BadRequest(ValueError):
    pass


def _image_field(data: dict, key: str) -> bytes:
    value = data.get(key)
    if not isinstance(value, str):
        raise _BadRequest(f"missing field '{key}'")
    try:
        return base64.b64decode(value, validate=True)
    except binascii.Error as e:
        raise _BadRequest(f"field '{key}' is not base64") from e


def _b64(rgb: np.ndarray) -> str:
    return base64.b64encode(encode_png(rgb)).decode("ascii")


def parse_recolor(instruction: str):
    """'recolor r g b lambda' -> (target rgb, lambda), or None for any other instruction."""
    parts = instruction.split()
    if not parts or parts[0].lower() != "recolor":
        return None
    if len(parts) != 5:
        raise _BadRequest("recolor needs 'recolor r g b lambda'")
    try:
        r, g, b, lam = (float(p) for p in parts[1:])
    except ValueError as e:
        raise _BadRequest(f"bad recolor arguments: {e}") from e
    return np.array([r, g, b]), lam


def create_app(token: Optional[str] = None) -> Flask:
    app = Flask(__name__)

    @app.before_request
    def check_token():
        if token and request.path != "/healthz":
            if request.headers.get("Authorization") != f"Bearer {token}":
                return jsonify({"message": "unauthorized"}), 401
        return None

    @app.errorhandler(_BadRequest)
    def bad_request(e):
        return jsonify({"message": str(e)}), 400

    @app.route("/healthz")
    def healthz():
        return jsonify({"status": "ok"})

    @app.route("/v1/edit", methods=["POST"])
    def edit():
        data = request.get_json(silent=True) or {}
        current_png = _image_field(data, "current_png")
        _image_field(data, "original_png")
        instruction = data.get("instruction", "")

        recolor = parse_recolor(instruction)
        if recolor is None:
            # identity: echo the exact bytes back
            return jsonify({"edited_png": base64.b64encode(current_png).decode("ascii")})

        target, lam = recolor
        rgb, _ = decode_png(current_png)
        return jsonify({"edited_png": _b64(rgb + lam * (target - rgb))})

    @app.route("/v1/inpaint", methods=["POST"])
    def inpaint():
        data = request.get_json(silent=True) or {}
        rgb, _ = decode_png(_image_field(data, "image_png"))
        mask = decode_mask_png(_image_field(data, "mask_png"))
        if mask.data.shape != rgb.shape[:2]:
            raise _BadRequest("image and mask differ in size")

        out = rgb.copy()
        masked = mask.data == 1
        if masked.any() and (~masked).any():
            out[masked] = rgb[~masked].mean(axis=0)
        return jsonify({"inpainted_png": _b64(out)})

    return app


class LoopbackServer:
    """Runs the app on a background thread; `port=0` picks a free port."""

    def __init__(self, port: int = 0, token: Optional[str] = None):
        self._server = make_server(HOST, port, create_app(token), threaded=True)
        self.port = self._server.server_port
        self.url = f"http://{HOST}:{self.port}"
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    def start(self) -> "LoopbackServer":
        self._thread.start()
        logger.info(f"✅ Loopback editor server on {self.url}")
        return self

    def shutdown(self) -> None:
        self._server.shutdown()
        self._thread.join(timeout=5)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.shutdown()


def serve_in_background(port: int = 0, token: Optional[str] = None) -> LoopbackServer:
    return LoopbackServer(port, token).start()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="loopback_server", description="Reference editor / inpainter server.")
    parser.add_argument("--port", type=int, default=int(os.getenv("RADIANT_LOOPBACK_PORT", DEFAULT_PORT)))
    parser.add_argument("--token", default=os.getenv("RADIANT_EDITOR_TOKEN") or None,
                        help="require 'Authorization: Bearer TOKEN' (default: $RADIANT_EDITOR_TOKEN)")
    return parser


def main(argv=None) -> None:
    load_dotenv()
    logging.basicConfig(level=logging.INFO)
    args = build_parser().parse_args(argv)
    logger.info(f"🚀 Loopback editor server running on http://{HOST}:{args.port}")
    create_app(args.token).run(host=HOST, port=args.port)


if __name__ == "__main__":
    main()
