import pytest

from models.experiment_run import ExperimentRun


def test_root(client):
    body = client.get("/").json()
    assert body["success"] is True
    assert "version" in body


def test_health(client):
    response = client.get("/health")
    assert response.status_code == 200
    assert response.json()["status"] == "ok"


class TestAnalysisEndpoints:
    def test_tradeoff(self, client):
        response = client.get("/api/analysis/tradeoff", params={"mu": 1.0, "alpha": 0.05})
        assert response.status_code == 200
        assert response.json()["data"]["beta"] == pytest.approx(0.740548, abs=1e-6)

    def test_tradeoff_rejects_negative_mu(self, client):
        assert client.get("/api/analysis/tradeoff", params={"mu": -1.0, "alpha": 0.05}).status_code == 422

    def test_curve(self, client):
        data = client.get("/api/analysis/tradeoff-curve", params={"mu": 1.0, "points": 11}).json()["data"]
        assert len(data["points"]) == 11
        assert data["points"][0] == {"alpha": 0.0, "beta": pytest.approx(1.0)}

    def test_gdp_to_dp(self, client):
        data = client.get("/api/analysis/gdp-to-dp", params={"mu": 1.0, "epsilon": 0.0}).json()["data"]
        assert data["delta"] == pytest.approx(0.382925, abs=1e-6)

    def test_dp_to_gdp(self, client):
        delta = client.get("/api/analysis/gdp-to-dp", params={"mu": 1.3, "epsilon": 0.7}).json()["data"]["delta"]
        data = client.get("/api/analysis/dp-to-gdp", params={"epsilon": 0.7, "delta": delta}).json()["data"]
        assert data["mu"] == pytest.approx(1.3, rel=1e-6)

    def test_lemma1(self, client):
        response = client.post("/api/analysis/lemma1", json={"alpha": 0.05, "beta": 0.5, "m_hat": [2, 2]})
        data = response.json()["data"]
        assert data["F"] == pytest.approx(0.33823, rel=1e-3)
        assert data["gdp_mu"] == pytest.approx(2 ** 1.5)

    def test_composed_mu(self, client):
        response = client.post("/api/analysis/composed-mu", json={"per_snv_shifts": [0.6], "variances": [0.09]})
        assert response.json()["data"]["mu"] == pytest.approx(2.0)

    def test_domain_error_body(self, client):
        response = client.post("/api/analysis/composed-mu", json={"per_snv_shifts": [1.0], "variances": [0.0]})
        assert response.status_code == 400
        body = response.json()
        assert body["success"] is False
        assert body["errors"]["error"] == "AnalysisError"


class TestExperimentEndpoints:
    def test_empty_registry(self, client):
        body = client.get("/api/experiments").json()
        assert body["data"] == []
        assert body["pagination"]["total"] == 0

    def test_unknown_run(self, client):
        response = client.get("/api/experiments/nope")
        assert response.status_code == 404
        assert response.json()["success"] is False

    def test_unknown_scenario(self, client):
        response = client.post("/api/experiments", json={"scenario": "nonexistent"})
        assert response.status_code == 422
        assert response.json()["errors"]["error"] == "ConfigError"

    def test_launch_and_fetch(self, client, tmp_path):
        payload = {
            "scenario": "ordering",
            "overrides": {
                "seeds": [0],
                "ordering": {"sigmas": ["q"], "mc_samples": 200, "calibration_samples": 1000},
            },
            "output_dir": str(tmp_path),
        }
        response = client.post("/api/experiments", json=payload)
        assert response.status_code == 202
        run_id = response.json()["data"]["run_id"]

        # the test client runs background tasks before returning
        run = client.get(f"/api/experiments/{run_id}").json()["data"]
        assert run["status"] == "finished"
        assert run["scenario"] == "ordering"
        assert run["seeds"] == [0]
        assert (tmp_path / run_id / "results.json").exists()

        listed = client.get("/api/experiments", params={"status": "finished"}).json()
        assert [r["run_id"] for r in listed["data"]] == [run_id]

    def test_pagination(self, client, db_session):
        for i in range(3):
            db_session.add(ExperimentRun(run_id=f"run-{i}", config_hash="0" * 64, status="finished", seeds="[0]"))
        db_session.commit()
        body = client.get("/api/experiments", params={"page": 2, "per_page": 2}).json()
        assert len(body["data"]) == 1
        assert body["pagination"]["total_pages"] == 2
