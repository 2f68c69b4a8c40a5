"""Latent container invariants and the f32le persistence round trip."""

from __future__ import annotations

import numpy as np
import pytest

from styledistill.latents import (
    Latent,
    LatentShapeError,
    LatentValueError,
    load_latent,
    load_latents,
    save_latent,
    save_latents,
)


class TestLatent:
    def test_shape_product_must_match(self):
        with pytest.raises(LatentShapeError):
            Latent(np.zeros(5), (2, 3))

    def test_rejects_non_finite(self):
        with pytest.raises(LatentValueError):
            Latent(np.array([1.0, np.nan]))
        with pytest.raises(LatentValueError):
            Latent(np.array([np.inf]))

    def test_rejects_non_positive_shape(self):
        with pytest.raises(LatentShapeError):
            Latent(np.zeros(0), (0,))

    def test_from_array_keeps_shape(self):
        lt = Latent.from_array(np.arange(6.0).reshape(2, 3))
        assert lt.shape == (2, 3)
        assert lt.array[1, 2] == 5.0

    def test_immutable_payload(self):
        lt = Latent(np.zeros(3))
        with pytest.raises(ValueError):
            lt.data[0] = 1.0

    def test_digest_depends_on_shape(self):
        a = Latent(np.zeros(6), (2, 3))
        b = Latent(np.zeros(6), (3, 2))
        assert a.digest() != b.digest()


class TestPersistence:
    def test_round_trip_is_byte_stable(self, tmp_path):
        rng = np.random.default_rng(0)
        latent = Latent(rng.standard_normal(12), (3, 4))
        header, binary = save_latent(tmp_path / "x", latent, config_digest="abc")
        first = (header.read_bytes(), binary.read_bytes())
        reloaded = load_latent(tmp_path / "x")
        save_latent(tmp_path / "y", reloaded, config_digest="abc")
        assert (tmp_path / "y.json").read_bytes() == first[0]
        assert (tmp_path / "y.bin").read_bytes() == first[1]

    def test_exact_values_survive_when_f32_representable(self, tmp_path):
        values = np.array([0.5, -1.25, 3.0, 0.0])
        save_latent(tmp_path / "x", Latent(values))
        assert np.array_equal(load_latent(tmp_path / "x").data, values)

    def test_stack_round_trip_preserves_count_and_digest(self, tmp_path):
        stack = [Latent(np.full(4, float(i))) for i in range(5)]
        save_latents(tmp_path / "s", stack, config_digest="cfg")
        loaded, digest = load_latents(tmp_path / "s")
        assert digest == "cfg"
        assert len(loaded) == 5
        assert all(np.array_equal(a.data, b.data) for a, b in zip(stack, loaded))

    def test_mixed_shapes_rejected(self, tmp_path):
        with pytest.raises(LatentShapeError):
            save_latents(tmp_path / "s", [Latent(np.zeros(2)), Latent(np.zeros(3))])

    def test_truncated_payload_detected(self, tmp_path):
        save_latent(tmp_path / "x", Latent(np.zeros(8)))
        binary = tmp_path / "x.bin"
        binary.write_bytes(binary.read_bytes()[:-4])
        with pytest.raises(LatentShapeError):
            load_latent(tmp_path / "x")
