import numpy as np
import pytest
from fastapi.testclient import TestClient

from app.core.seeding import StreamRole, make_rng
from app.main import app
from app.services.greedy import online_solve, run_scheduled
from app.services.params import SamplingMeasure
from app.services.persistence import save_basis


@pytest.fixture
def client():
    return TestClient(app)


@pytest.fixture
def served_basis(small_solver, tmp_path, monkeypatch):
    rb, _ = run_scheduled(3, 1.5, SamplingMeasure.UNIFORM, small_solver, make_rng(0, StreamRole.TRAINING, "api"))
    path = save_basis(rb, tmp_path / "served.rb")
    monkeypatch.setenv("RBGREEDY_BASIS_PATH", str(path))
    return rb, path


def test_no_basis_configured(client):
    assert client.get("/api/online/basis").status_code == 503
    response = client.post("/api/online/solve", json={"y": [[0.0, 0.0, 0.0, 0.0]]})
    assert response.status_code == 503


def test_basis_info(client, served_basis):
    rb, path = served_basis
    body = client.get("/api/online/basis").json()
    assert body["path"] == str(path)
    assert body["n"] == rb.n == 3
    assert body["d"] == 4


def test_solve(client, served_basis):
    rb, _ = served_basis
    ys = [[0.1, -0.2, 0.3, -0.4], [1.0, 1.0, -1.0, -1.0]]
    response = client.post("/api/online/solve", json={"y": ys})
    assert response.status_code == 200
    body = response.json()
    assert body["n"] == 3
    assert [r["row"] for r in body["results"]] == [0, 1]
    for y, result in zip(ys, body["results"]):
        expected = online_solve(rb, y).coeffs
        np.testing.assert_allclose(result["coeffs"], expected, rtol=1e-12)
        assert result["vnorm"] == pytest.approx(np.linalg.norm(expected))
        assert result["residual"] > 0
        assert result["lifted"] is None


def test_solve_with_lift(client, served_basis):
    rb, _ = served_basis
    response = client.post("/api/online/solve", json={"y": [[0.0, 0.0, 0.0, 0.0]], "lift": True})
    assert response.status_code == 200
    assert len(response.json()["results"][0]["lifted"]) == rb.n_h


def test_solve_rejects_bad_parameters(client, served_basis):
    assert client.post("/api/online/solve", json={"y": [[0.0, 0.0]]}).status_code == 422
    assert client.post("/api/online/solve", json={"y": []}).status_code == 422
    assert client.post("/api/online/solve", json={"y": [[2.0, 0.0, 0.0, 0.0]]}).status_code == 422


def test_corrupt_basis_file(client, served_basis):
    _, path = served_basis
    data = bytearray(path.read_bytes())
    data[-20] ^= 0xFF
    path.write_bytes(bytes(data))
    assert client.post("/api/online/solve", json={"y": [[0.0, 0.0, 0.0, 0.0]]}).status_code == 500
