"""Scripted in-process stand-ins for the gateway, backend, and embedder.

The mock gateway speaks real HTTP through httpx.MockTransport, so the wire
protocol, retry loop, and transcript logging run exactly as in production.
"""

from __future__ import annotations

import json
import re
from pathlib import Path

import httpx
import numpy as np
from PIL import Image

from styledistill.distill import GeneratedSample, PromptPair
from styledistill.flow import Direction, conditional_drift
from styledistill.gateway import VlmGateway
from styledistill.latents import Latent


def make_png(path: Path, size=(16, 16), color=(120, 80, 200), seed: int | None = None) -> Path:
    """Write a tiny deterministic PNG."""
    arr = np.zeros((size[1], size[0], 3), dtype=np.uint8)
    arr[:, :] = color
    if seed is not None:
        rng = np.random.default_rng(seed)
        arr = (arr.astype(int) + rng.integers(0, 40, arr.shape)).clip(0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)
    return path


FIXTURE_ATTRIBUTES = {
    "face": "Oval face, dark brown eyes, short curly black hair, light warm skin tone.",
    "attire": "Navy crew-neck sweater over a white collared shirt, silver wristwatch.",
    "pose": "Standing upright, shoulders level, head turned slightly left, hands relaxed.",
    "scene": "Indoor office with a bright window camera-left and a plain gray wall.",
}

FIXTURE_T512 = (
    "Portrait of an adult with an oval face, dark brown eyes, short curly black hair,"
    " light warm skin tone, wearing a navy crew-neck sweater over a white collared"
    " shirt with a silver wristwatch, standing upright with shoulders level and head"
    " turned slightly left in a bright indoor office beside a window."
)
FIXTURE_T77 = (
    "adult portrait, oval face, curly black hair, navy sweater, white shirt,"
    " office window light"
)


def dual_prompt_response(t512: str, t77: str) -> str:
    return (
        f"T5 Embedding Prompt (512 tokens max):\n{t512}\n\n"
        f"CLIP Embedding Prompt (77 tokens max):\n{t77}\n"
    )


class ScriptedVlmApp:
    """Request handler emulating a chat-completions endpoint.

    Routes on the rendered prompt text: extraction templates answer with fixed
    attribute texts, the combine/stylize templates with a dual-prompt block,
    the diff template with a scripted delta queue, the schedule template with
    configurable JSON, and the judge with a scripted score queue.
    """

    def __init__(self):
        self.calls: list[dict] = []
        self.deltas: list[str] = ["- add: silver wristwatch on the left wrist"]
        self.judge_responses: list[str] = []
        self.schedule_response: str = '{"eta": 0.7, "start": 0.0, "stop": 0.3}'
        self.compressor_responses: list[str] = []
        self.styler_responses: list[str] = []
        self.fail_next: int = 0

    def handler(self, request: httpx.Request) -> httpx.Response:
        if self.fail_next > 0:
            self.fail_next -= 1
            raise httpx.ConnectError("scripted connection failure", request=request)
        payload = json.loads(request.content.decode("utf-8"))
        text = "".join(
            part.get("text", "")
            for part in payload["messages"][0]["content"]
            if part.get("type") == "text"
        )
        n_images = sum(
            1 for part in payload["messages"][0]["content"] if part.get("type") == "image_url"
        )
        self.calls.append({"text": text, "images": n_images, "model": payload["model"]})
        return httpx.Response(200, json={
            "choices": [{"message": {"content": self._reply(text)}}]
        })

    def _reply(self, text: str) -> str:
        if "forensic style facial description" in text:
            return FIXTURE_ATTRIBUTES["face"]
        if "clothing, accessories" in text:
            return FIXTURE_ATTRIBUTES["attire"]
        if "pose, body orientation" in text:
            return FIXTURE_ATTRIBUTES["pose"]
        if "background and setting" in text:
            return FIXTURE_ATTRIBUTES["scene"]
        if "compress and distill" in text:
            if self.compressor_responses:
                return self.compressor_responses.pop(0)
            return dual_prompt_response(FIXTURE_T512, FIXTURE_T77)
        if "adapt a pair of identity-rich" in text:
            if self.styler_responses:
                return self.styler_responses.pop(0)
            style = re.search(r"The target style is: ([^.]+)\.", text)
            tag = style.group(1) if style else "styled"
            return dual_prompt_response(
                f"{tag} rendition: {FIXTURE_T512}", f"{tag}, {FIXTURE_T77}"
            )
        if "structural-guidance schedule" in text:
            return self.schedule_response
        if "differential analysis" in text:
            return self.deltas.pop(0) if self.deltas else ""
        if "stylized abstraction, not realism" in text:
            if self.judge_responses:
                return self.judge_responses.pop(0)
            return "Score: 4"
        return "OK"


def scripted_gateway(app: ScriptedVlmApp, sink=None, backoff_s: float = 0.0) -> VlmGateway:
    client = httpx.Client(transport=httpx.MockTransport(app.handler))
    return VlmGateway(client=client, transcript_sink=sink, backoff_s=backoff_s)


class ProceduralBackend:
    """Deterministic generation backend writing seeded noise PNGs."""

    def __init__(self, workdir: Path, latent_shape=(4,)):
        self.workdir = Path(workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.latent_shape = tuple(latent_shape)
        self.fail_next = 0

    def generate(self, prompts: PromptPair, seed: int) -> GeneratedSample:
        if self.fail_next > 0:
            self.fail_next -= 1
            raise RuntimeError("scripted backend failure")
        rng = np.random.default_rng(seed)
        path = self.workdir / f"cand_{seed}.png"
        make_png(path, seed=seed % 2**31)
        latent = Latent(rng.standard_normal(int(np.prod(self.latent_shape))),
                        self.latent_shape)
        return GeneratedSample(path, latent)

    def encode(self, image_path: Path) -> Latent:
        data = Path(image_path).read_bytes()
        rng = np.random.default_rng(len(data) % 2**31)
        return Latent(rng.standard_normal(int(np.prod(self.latent_shape))),
                      self.latent_shape)

    def decode(self, latent: Latent) -> bytes:
        import io

        arr = np.asarray(latent.data)
        gray = int(abs(arr).mean() * 40) % 255
        im = Image.new("RGB", (16, 16), (gray, gray, gray))
        buf = io.BytesIO()
        im.save(buf, format="PNG")
        return buf.getvalue()

    def velocity_field(self, conditioning=None):
        return _PointishField(self.latent_shape)


class _PointishField:
    """Analytic stand-in for a model velocity field."""

    def __init__(self, shape):
        self._target = Latent(np.linspace(-1.0, 1.0, int(np.prod(shape))), tuple(shape))

    def evaluate(self, state, t, conditioning=None, direction=Direction.REVERSE_TO_DATA):
        if direction is Direction.REVERSE_TO_DATA:
            return conditional_drift(state, t, self._target, 1e-4)
        return state.with_data(-self._target.data)

    def descriptor(self):
        return {"kind": "mock-pointish", "target": self._target.digest()}


class ScriptedEmbedder:
    """Returns unit vectors so that cosine(reference, candidate_k) follows a script.

    The reference image embeds to e1; the k-th distinct other image embeds to
    (cos a_k, sin a_k) where a_k comes from the scripted alignment sequence.
    """

    def __init__(self, reference_path: Path, alignments):
        self.reference = str(Path(reference_path))
        self.alignments = list(alignments)
        self._seen: dict[str, int] = {}

    def embed_image(self, path: Path, space: str) -> np.ndarray:
        key = str(Path(path))
        if key == self.reference:
            return np.array([1.0, 0.0])
        if key not in self._seen:
            self._seen[key] = len(self._seen)
        idx = min(self._seen[key], len(self.alignments) - 1)
        a = float(self.alignments[idx])
        return np.array([a, float(np.sqrt(max(0.0, 1.0 - a * a)))])

    def embed_text(self, text: str, space: str) -> np.ndarray:
        raise NotImplementedError("scripted embedder is image-only")


class WordCounter:
    """Deterministic local tokenizer oracle for tests."""

    name = "word-counter"
    _tokens = re.compile(r"\w+|[^\w\s]")

    def count(self, text: str, kind: str) -> int:
        return len(self._tokens.findall(text))
