"""HTTP+JSON adapters for model-backed oracles.

Each oracle role talks to one endpoint. Requests carry base64 PNG images
plus text; responses carry text or a float vector. Transport errors are
retried once; anything else raises OracleError. Only the mock oracles run
in CI; these adapters exist so a real model service can be dropped in
without touching the pipeline.

Wire contract (all POST, JSON bodies):
    /filter    {"reference_image": b64, "target_image": b64, "prompt": str}
               -> {"keep": bool, "reason": str}
    /annotate  {"reference_image": b64, "target_image": b64, "prompt": str}
               -> {"text": str}
    /invert    {"reference_image": b64, "prompt": str}
               -> {"caption": str}
    /embed     {"image": b64} or {"text": str}
               -> {"embedding": [float, ...]}       (unit L2 norm)
    /score     {"generated_image": b64, "reference_image"?: b64,
                "prompt": str, "rubric": "dp"|"pf"}
               -> {"score": float}                   (raw 0-4)
"""

from __future__ import annotations

import base64
import io
from dataclasses import dataclass
from importlib import resources

import numpy as np
import requests

from .pipeline import Attempt, ImageRef, OracleError


def load_prompt(name: str) -> str:
    return resources.files("albumgen.prompts").joinpath(f"{name}.txt").read_text(
        encoding="utf-8")


def render_feedback(attempts: list[Attempt]) -> str:
    """Format prior attempts into the {feedback} slot of the annotate prompt."""
    item = load_prompt("feedback_item")
    lines = [item.format(text=a.text, score=f"{a.score:.3f}" if a.score is not None
                         else "error")
             for a in attempts]
    return "\n".join(lines)


def image_to_b64(image) -> str:
    from PIL import Image
    arr = image.numpy() if hasattr(image, "numpy") else np.asarray(image)
    arr = (np.clip(arr, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


@dataclass
class EndpointConfig:
    base_url: str
    timeout: float = 30.0


class _HttpClient:
    def __init__(self, cfg: EndpointConfig, session=None):
        self.cfg = cfg
        self.session = session or requests.Session()

    def post(self, route: str, payload: dict) -> dict:
        url = self.cfg.base_url.rstrip("/") + route
        last_exc = None
        for _ in range(2):  # retry once on transport errors only
            try:
                resp = self.session.post(url, json=payload, timeout=self.cfg.timeout)
            except requests.RequestException as exc:
                last_exc = exc
                continue
            if resp.status_code != 200:
                raise OracleError(f"{url} returned {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()
            except ValueError as exc:
                raise OracleError(f"{url} returned non-JSON body") from exc
        raise OracleError(f"{url} unreachable: {last_exc}")


class HttpFilterOracle(_HttpClient):
    def judge(self, pair) -> tuple[bool, str]:
        body = self.post("/filter", {
            "reference_image": image_to_b64(pair.ref.render()),
            "target_image": image_to_b64(pair.target.render()),
            "prompt": load_prompt("pair_filter"),
        })
        return bool(body["keep"]), str(body.get("reason", ""))


class HttpAnnotateOracle(_HttpClient):
    def annotate(self, pair, feedback: list[Attempt]) -> str:
        prompt = load_prompt("annotate").format(feedback=render_feedback(feedback))
        body = self.post("/annotate", {
            "reference_image": image_to_b64(pair.ref.render()),
            "target_image": image_to_b64(pair.target.render()),
            "prompt": prompt,
        })
        return str(body["text"])


class HttpInvertOracle(_HttpClient):
    def invert_caption(self, ref: ImageRef, text: str) -> str:
        prompt = load_prompt("invert").format(text=text)
        body = self.post("/invert", {
            "reference_image": image_to_b64(ref.render()),
            "prompt": prompt,
        })
        return str(body["caption"])


class HttpEmbedOracle(_HttpClient):
    def _embedding(self, payload: dict) -> np.ndarray:
        body = self.post("/embed", payload)
        vec = np.asarray(body["embedding"], dtype=np.float64)
        norm = np.linalg.norm(vec)
        if not np.isfinite(norm) or norm <= 0:
            raise OracleError("embed endpoint returned a degenerate vector")
        return vec / norm

    def embed_image(self, image) -> np.ndarray:
        img = image.render() if isinstance(image, ImageRef) else image
        return self._embedding({"image": image_to_b64(img)})

    def embed_text(self, text: str) -> np.ndarray:
        if not text.strip():
            raise OracleError("empty input")
        return self._embedding({"text": text})


class HttpScoreOracle(_HttpClient):
    """0-4 rubric scores from a judge endpoint, normalized to [0, 1]."""

    def score(self, generated, context, rubric: str) -> float:
        if rubric not in ("dp", "pf"):
            raise ValueError(f"unknown rubric {rubric!r}")
        payload = {"generated_image": image_to_b64(generated), "rubric": rubric}
        if rubric == "dp":
            payload["reference_image"] = image_to_b64(context)
            payload["prompt"] = load_prompt("dp_rubric")
        else:
            payload["prompt"] = load_prompt("pf_rubric").format(text=context)
        body = self.post("/score", payload)
        raw = float(body["score"])
        if not 0.0 <= raw <= 4.0:
            raise OracleError(f"rubric score {raw} outside 0-4")
        return raw / 4.0
