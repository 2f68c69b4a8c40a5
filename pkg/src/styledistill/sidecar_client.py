"""HTTP client for the model sidecar: generation, latent codecs, velocity
evaluation, embeddings, and tokenizer counts.

The engine treats the sidecar's latent space as opaque; latents travel as a
JSON envelope {shape, dtype: "f32le", data_b64} matching the on-disk format.
"""

from __future__ import annotations

import base64
import hashlib
import tempfile
from pathlib import Path
from typing import Optional

import httpx
import numpy as np

from .distill import GeneratedSample, PromptPair
from .flow import Direction
from .latents import Latent


class SidecarError(RuntimeError):
    """Sidecar answered with an error status."""

    def __init__(self, status_code: int, detail: str):
        self.status_code = status_code
        super().__init__(f"sidecar HTTP {status_code}: {detail}")


def latent_to_wire(latent: Latent) -> dict:
    data = latent.data.astype("<f4").tobytes()
    return {
        "shape": list(latent.shape),
        "dtype": "f32le",
        "data_b64": base64.b64encode(data).decode("ascii"),
    }


def latent_from_wire(obj: dict) -> Latent:
    raw = np.frombuffer(base64.b64decode(obj["data_b64"]), dtype="<f4")
    return Latent(raw.astype(np.float64), tuple(int(s) for s in obj["shape"]))


class SidecarClient:
    """Synchronous client over all sidecar endpoints."""

    name = "sidecar-tokenizer"

    def __init__(
        self,
        base_url: str,
        client: Optional[httpx.Client] = None,
        workdir: Optional[Path] = None,
        generation_steps: int = 50,
        timeout_s: float = 300.0,
    ):
        self.base_url = base_url.rstrip("/")
        self._client = client or httpx.Client(timeout=timeout_s)
        self._workdir = Path(workdir) if workdir else Path(tempfile.mkdtemp(prefix="sidecar-"))
        self._workdir.mkdir(parents=True, exist_ok=True)
        self.generation_steps = generation_steps

    def _post(self, endpoint: str, payload: dict) -> dict:
        resp = self._client.post(f"{self.base_url}{endpoint}", json=payload)
        if resp.status_code != 200:
            raise SidecarError(resp.status_code, resp.text[:300])
        return resp.json()

    def health(self) -> dict:
        resp = self._client.get(f"{self.base_url}/health")
        if resp.status_code != 200:
            raise SidecarError(resp.status_code, resp.text[:300])
        return resp.json()

    # -- generation backend protocol -------------------------------------------

    def generate(self, prompts: PromptPair, seed: int) -> GeneratedSample:
        body = self._post(
            "/generate",
            {"t512": prompts.t512, "t77": prompts.t77, "seed": seed,
             "steps": self.generation_steps},
        )
        image = base64.b64decode(body["image_b64"])
        tag = hashlib.sha256(prompts.t77.encode("utf-8")).hexdigest()[:12]
        path = self._workdir / f"gen_{seed}_{tag}.png"
        path.write_bytes(image)
        return GeneratedSample(path, latent_from_wire(body["latent"]))

    def encode(self, image_path: Path) -> Latent:
        image_b64 = base64.b64encode(Path(image_path).read_bytes()).decode("ascii")
        body = self._post("/encode", {"image_b64": image_b64})
        return latent_from_wire(body["latent"])

    def decode(self, latent: Latent) -> bytes:
        body = self._post("/decode", {"latent": latent_to_wire(latent)})
        return base64.b64decode(body["image_b64"])

    def velocity_field(self, conditioning: Optional[PromptPair] = None) -> "SidecarVelocityField":
        return SidecarVelocityField(self, conditioning)

    # -- embedder protocol -------------------------------------------------------

    def embed_image(self, path: Path, space: str) -> np.ndarray:
        image_b64 = base64.b64encode(Path(path).read_bytes()).decode("ascii")
        body = self._post("/embed", {"image_b64": image_b64, "space": space})
        return np.asarray(body["vector"], dtype=np.float64)

    def embed_text(self, text: str, space: str) -> np.ndarray:
        body = self._post("/embed", {"text": text, "space": space})
        return np.asarray(body["vector"], dtype=np.float64)

    # -- tokenizer oracle protocol ------------------------------------------------

    def count(self, text: str, kind: str) -> int:
        body = self._post("/tokenize", {"text": text, "tokenizer": kind})
        return int(body["count"])


class SidecarVelocityField:
    """VelocityField backed by the sidecar's /velocity endpoint."""

    def __init__(self, client: SidecarClient, conditioning: Optional[PromptPair]):
        self._client = client
        self._conditioning = conditioning
        self._models = None

    def evaluate(self, state: Latent, t: float, conditioning=None,
                 direction: Direction = Direction.REVERSE_TO_DATA) -> Latent:
        cond = conditioning if conditioning is not None else self._conditioning
        body = self._client._post(
            "/velocity",
            {
                "latent": latent_to_wire(state),
                "t": t,
                "t512": getattr(cond, "t512", ""),
                "t77": getattr(cond, "t77", ""),
                "direction": direction.value,
            },
        )
        return latent_from_wire(body["velocity"])

    def descriptor(self) -> dict:
        if self._models is None:
            health = self._client.health()
            self._models = health.get("models_loaded", [])
        return {
            "kind": "sidecar-velocity",
            "models": self._models,
            "conditioning": None if self._conditioning is None else {
                "t512": self._conditioning.t512,
                "t77": self._conditioning.t77,
            },
        }
