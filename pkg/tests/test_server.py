import pytest

import json

from pathlib import Path

from flask.testing import FlaskClient

import uspsim

from uspsim.cli import PROFILE_DIR

from uspsim.server import create_app, profile_names


@pytest.fixture
def client() -> FlaskClient:
    app = create_app()
    with app.test_client() as client:
        yield client


@pytest.fixture
def profile_dir(tmp_path: Path) -> Path:
    path = tmp_path / "profiles"
    path.mkdir()
    (path / "slow.json").write_text(json.dumps({
        "link_bandwidth": 1e9,
        "link_latency": 1e-4,
        "launch_overhead": 1e-5,
    }))
    (path / "tiny.json").write_text(json.dumps({"b": 1, "h": 4, "s": 16, "d": 8, "kernels_per_step": 10}))
    (path / "not a name.json").write_text("{}")
    return path


def post(client: FlaskClient, url: str, body: object):
    return client.post(url, data=json.dumps(body), content_type="application/json")


def test_profile_names(profile_dir: Path) -> None:
    assert profile_names(profile_dir) == ["slow", "tiny"]
    assert profile_names(PROFILE_DIR) == ["flux", "nvlink"]


def test_missing_profile_dir(tmp_path: Path) -> None:
    with pytest.raises(FileNotFoundError):
        create_app(tmp_path / "missing")


def test_status(client: FlaskClient) -> None:
    response = client.get("/status").get_json()
    assert response == {"name": "uspsim", "version": uspsim.__version__, "profiles": ["flux", "nvlink"]}


class TestMesh:

    def test_chosen_mesh(self, client: FlaskClient) -> None:
        response = client.get("/mesh?workers=8&max_ring=2&heads=24")
        assert response.status_code == 200
        mesh = response.get_json()
        assert (mesh["N"], mesh["R"], mesh["U"]) == (8, 2, 4)
        assert mesh["ulysses_groups"] == [[0, 1, 2, 3], [4, 5, 6, 7]]

    def test_default_max_ring(self, client: FlaskClient) -> None:
        mesh = client.get("/mesh?workers=4&heads=8").get_json()
        assert (mesh["R"], mesh["U"]) == (1, 4)

    def test_infeasible(self, client: FlaskClient) -> None:
        response = client.get("/mesh?workers=4&heads=3")
        assert response.status_code == 400
        assert "H mod U" in response.get_json()["error"]

    def test_bad_arguments(self, client: FlaskClient) -> None:
        assert client.get("/mesh?workers=four&heads=4").status_code == 400
        assert client.get("/mesh?heads=4").status_code == 400


class TestProfiles:

    def test_packaged(self, client: FlaskClient) -> None:
        profile = client.get("/profiles/nvlink").get_json()
        assert profile["link_bandwidth"] == 900e9

    @pytest.mark.parametrize("name", ["missing", "..", "nvlink.json"])
    def test_not_found(self, client: FlaskClient, name: str) -> None:
        assert client.get(f"/profiles/{name}").status_code == 404


class TestSimulate:

    def test_trace(self, client: FlaskClient) -> None:
        response = post(client, "/simulate", {"seed": 0, "workers": 2, "max_ring": 2, "dims": "1x4x8x4"})
        assert response.status_code == 200
        trace = response.get_json()
        assert trace["mesh"]["R"] == 2
        assert trace["oracle"]["max_abs_diff"] <= 1e-5
        assert trace["traffic_summary"]["per_rank"]["0"]["send"]["rounds"] == 1

    def test_deterministic(self, client: FlaskClient) -> None:
        body = {"seed": 4, "workers": 4, "max_ring": 2, "pipelined": True, "dims": "1x4x8x4"}
        first = post(client, "/simulate", body).get_json()
        second = post(client, "/simulate", body).get_json()
        assert first == second

    @pytest.mark.parametrize(
        "body",
        [
            {"workers": 2},
            {"seed": 0, "workers": 4, "dims": "1x3x8x4"},
            {"seed": 0, "workers": 2, "out": "/tmp/trace.json"},
            {"seed": 0, "workers": 2, "config": "run.json"},
            {"seed": 0, "colour": "green"},
            [1, 2, 3],
        ],
    )
    def test_bad_request(self, client: FlaskClient, body: object) -> None:
        response = post(client, "/simulate", body)
        assert response.status_code == 400
        assert "error" in response.get_json()


class TestCost:

    def test_packaged_profiles(self, client: FlaskClient) -> None:
        response = post(client, "/cost", {"workers": [2], "compiled": True})
        assert response.status_code == 200
        report = response.get_json()
        (row,) = report["rows"]
        assert row["config"] == "N=2 R=1 U=2 compiled"
        assert 1.10 <= row["speedup"] <= 1.20

    def test_custom_profile_dir(self, profile_dir: Path) -> None:
        app = create_app(profile_dir)
        with app.test_client() as client:
            response = post(client, "/cost", {"hw": "slow", "workload": "tiny", "workers": "1,2"})
            assert response.status_code == 200
            report = response.get_json()
            assert report["hardware"]["link_bandwidth"] == 1e9
            assert [row["config"] for row in report["rows"]] == ["N=1 R=1 U=1", "N=2 R=1 U=2"]

            # Packaged profiles are not visible through another directory
            assert post(client, "/cost", {"hw": "nvlink", "workload": "tiny"}).status_code == 400

    @pytest.mark.parametrize("hw", [str(PROFILE_DIR / "nvlink.json"), "../nvlink", "missing"])
    def test_only_profile_names(self, client: FlaskClient, hw: str) -> None:
        response = post(client, "/cost", {"hw": hw})
        assert response.status_code == 400

    def test_infeasible(self, client: FlaskClient) -> None:
        response = post(client, "/cost", {"workers": [4], "dims": "1x3x16x8"})
        assert response.status_code == 400
