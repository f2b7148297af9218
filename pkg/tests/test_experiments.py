import json

import numpy as np
import pytest

from models.experiment_run import ExperimentRun
from schemas.experiment import SCENARIOS, load_experiment_config, scenario_config, validate_config
from services.experiment_service import load_report, report_lines, run_experiment, run_seed
from utils.exceptions import ConfigError, LabError, PopulationError

TINY = {
    "name": "tiny",
    "seeds": [0, 1],
    "population": {"num_individuals": 12, "num_snvs": 40},
    "defenses": [{"kind": "zero"}, {"kind": "laplace", "epsilon": 50.0}],
    "attackers": [{"kind": "fixed_lrt"}, {"kind": "adaptive_lrt"}],
    "evaluation": {"eval_beacons": 20, "calibration_samples": 1000, "utility_samples": 50},
}

TINY_TRAINING = {"epochs": 1, "batches_per_epoch": 2, "batch_size": 8, "defender_hidden": [8], "attacker_hidden": [8]}


def config_errors(payload) -> list:
    with pytest.raises(ConfigError) as info:
        validate_config(payload)
    return info.value.details["errors"]


# ── schema ─────────────────────────────────────────────────────

class TestSchema:
    def test_defense_required(self):
        errors = config_errors({})
        assert any("at least one defense" in e for e in errors)

    def test_error_carries_path(self):
        errors = config_errors({"defenses": [{"kind": "laplace"}]})
        assert any(e.startswith("defenses.0") and "epsilon" in e for e in errors)

    def test_unknown_field(self):
        errors = config_errors({"defenses": [{"kind": "zero"}], "population": {"bogus": 1}})
        assert any(e.startswith("population.bogus") for e in errors)

    def test_negative_kappa(self):
        errors = config_errors({"defenses": [{"kind": "bayes", "kappa": -1.0}]})
        assert any(e.startswith("defenses.0.kappa") for e in errors)

    def test_empty_seed_list(self):
        errors = config_errors({"defenses": [{"kind": "zero"}], "seeds": []})
        assert any(e.startswith("seeds") for e in errors)

    def test_duplicate_labels(self):
        config_errors({"defenses": [{"kind": "zero"}, {"kind": "zero"}]})

    def test_match_must_exist(self):
        config_errors({"defenses": [{"kind": "matched_dp", "match": "missing"}]})

    def test_ordering_needs_gaussian_defenses(self):
        config_errors({"defenses": [{"kind": "zero"}], "ordering": {}})

    def test_kappa_grid_expansion(self):
        config = validate_config({"defenses": [{"kind": "bayes"}], "grid": {"kappa": [0.0, 1.5, 50.0]}})
        names = [d.name for d in config.expanded_defenses()]
        assert names == ["bayes-kappa0", "bayes-kappa1.5", "bayes-kappa50"]

    def test_epsilon_grid_expansion(self):
        config = validate_config({"defenses": [{"kind": "laplace", "epsilon": 1.0}], "grid": {"epsilon": [10.0, 600.0]}})
        assert [d.name for d in config.expanded_defenses()] == ["laplace-eps10", "laplace-eps600"]

    def test_trained_defense_defaults_to_zero_kappa(self):
        config = validate_config({"defenses": [{"kind": "fixed_lrt"}]})
        assert config.expanded_defenses()[0].kappa == 0.0


class TestScenarios:
    @pytest.mark.parametrize("name", sorted(SCENARIOS))
    def test_every_scenario_validates(self, name):
        config = scenario_config(name)
        assert config.scenario == name

    def test_kappa_zero_scenario_has_three_attackers(self):
        config = scenario_config("bayes-kappa0", {"seeds": [3]})
        assert [a.kind for a in config.attackers] == ["bayes", "fixed_lrt", "adaptive_lrt"]
        assert config.defenses[0].kappa == 0.0
        assert config.seeds == [3]

    def test_laplace_scenario_is_eps_600(self):
        assert scenario_config("laplace-eps600").defenses[0].epsilon == 600.0

    def test_unknown_scenario(self):
        with pytest.raises(ConfigError):
            scenario_config("nonexistent")

    def test_yaml_file_with_scenario(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("scenario: bayes-kappa1.5\nseeds: [7]\n")
        config = load_experiment_config(path, {"evaluation": {"eval_beacons": 10}})
        assert config.defenses[0].kappa == 1.5
        assert config.seeds == [7]
        assert config.evaluation.eval_beacons == 10

    def test_yaml_must_be_a_mapping(self, tmp_path):
        path = tmp_path / "list.yaml"
        path.write_text("- 1\n- 2\n")
        with pytest.raises(ConfigError):
            load_experiment_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_experiment_config(tmp_path / "absent.yaml")


# ── runs ───────────────────────────────────────────────────────

class TestRunExperiment:
    def test_tiny_run_writes_artifacts(self, tmp_path, db_session):
        config = validate_config(TINY)
        report = run_experiment(config, output_dir=str(tmp_path), db=db_session, workers=1, run_id="tiny-run")

        run_dir = tmp_path / "tiny-run"
        assert (run_dir / "results.json").exists()
        assert set(report.cells) == {
            "zero__fixed_lrt", "zero__adaptive_lrt", "laplace-eps50__fixed_lrt", "laplace-eps50__adaptive_lrt",
        }
        assert (run_dir / "roc_zero__fixed_lrt.csv").read_text().splitlines()[0] == "fpr,tpr"
        for cell in report.cells.values():
            assert len(cell["auc"]["per_seed"]) == 2
            assert 0.0 <= cell["pooled_auc"] <= 1.0
        assert report.cells["zero__fixed_lrt"]["auc"]["mean"] > 0.5
        assert report.defenses["zero"]["utility_loss"]["mean"] == 0.0

        row = db_session.query(ExperimentRun).filter(ExperimentRun.run_id == "tiny-run").one()
        assert row.status == "finished"
        assert len(row.cells) == 4
        assert set(json.loads(row.mean_auc_json)) == set(report.cells)

    def test_report_round_trip(self, tmp_path):
        report = run_experiment(validate_config({**TINY, "seeds": [0]}), output_dir=str(tmp_path), run_id="r1")
        results = load_report(tmp_path / "r1")
        assert results["config_hash"] == report.config_hash
        # one seed: the std is NaN and survives the JSON round trip
        assert np.isnan(results["cells"]["zero__fixed_lrt"]["auc"]["std"])
        lines = report_lines(results)
        assert lines[0].startswith("run r1")
        assert any("zero__adaptive_lrt" in line for line in lines)

    def test_missing_report(self, tmp_path):
        with pytest.raises(LabError):
            load_report(tmp_path / "nothing")

    def test_seed_is_deterministic(self):
        payload = validate_config(TINY).model_dump(mode="json")
        a = run_seed(payload, 3)
        b = run_seed(payload, 3)
        assert a["cells"]["laplace-eps50__fixed_lrt"]["auc"] == b["cells"]["laplace-eps50__fixed_lrt"]["auc"]
        assert a["cells"]["zero__adaptive_lrt"]["confidences"] == b["cells"]["zero__adaptive_lrt"]["confidences"]

    def test_workers_match_serial(self, tmp_path):
        config = validate_config({**TINY, "defenses": [{"kind": "zero"}], "attackers": [{"kind": "fixed_lrt"}]})
        serial = run_experiment(config, output_dir=str(tmp_path), workers=1, run_id="serial")
        parallel = run_experiment(config, output_dir=str(tmp_path), workers=2, run_id="parallel")
        assert serial.cells["zero__fixed_lrt"]["auc"] == parallel.cells["zero__fixed_lrt"]["auc"]

    def test_no_attackers_reports_utility_only(self, tmp_path, db_session):
        config = validate_config({**TINY, "attackers": []})
        report = run_experiment(config, output_dir=str(tmp_path), db=db_session, run_id="utility-only")
        assert report.cells == {}
        assert report.defenses["laplace-eps50"]["utility_loss"]["mean"] > 0.0
        row = db_session.query(ExperimentRun).filter(ExperimentRun.run_id == "utility-only").one()
        assert {cell.defense for cell in row.cells} == {"zero", "laplace-eps50"}

    def test_trained_defense_and_bayes_attacker(self, tmp_path):
        config = validate_config({
            **TINY,
            "seeds": [0],
            "defenses": [{"kind": "bayes", "kappa": 1.0}, {"kind": "zero"}],
            "attackers": [{"kind": "bayes"}],
            "training": TINY_TRAINING,
        })
        report = run_experiment(config, output_dir=str(tmp_path), run_id="trained")
        assert set(report.cells) == {"bayes-kappa1__bayes", "zero__bayes"}
        assert (tmp_path / "trained" / "history_bayes-kappa1_seed0.csv").exists()
        assert (tmp_path / "trained" / "history_zero__bayes_seed0.csv").exists()

    def test_matched_dp_defense(self, tmp_path):
        config = validate_config({
            **TINY,
            "seeds": [0],
            "defenses": [
                {"kind": "bayes", "kappa": "heterogeneous", "label": "bayes"},
                {"kind": "matched_dp", "match": "bayes", "label": "matched-dp"},
            ],
            "attackers": [],
            "training": TINY_TRAINING,
            "evaluation": {**TINY["evaluation"], "utility_samples": 2000},
        })
        report = run_experiment(config, output_dir=str(tmp_path), run_id="matched")
        match = report.defenses["matched-dp"]["matches"][0]
        assert match["matched"]
        assert report.defenses["matched-dp"]["kind"] == "matched_dp"

    def test_ordering_scenario(self, tmp_path):
        config = scenario_config("ordering", {
            "seeds": [0],
            "ordering": {"sigmas": ["q"], "mc_samples": 200, "calibration_samples": 1000},
        })
        report = run_experiment(config, output_dir=str(tmp_path), run_id="ordering")
        check = report.ordering["gaussian__sigma-q"]
        assert len(check["holds_per_seed"]) == 1
        assert set(check["per_seed"][0]["checks"]) == {"mirror>=optimal", "optimal>=adaptive", "adaptive>=naive"}

    def test_failed_run_is_recorded(self, tmp_path, db_session):
        config = validate_config({**TINY, "population": {"path": str(tmp_path / "missing.txt")}})
        with pytest.raises(PopulationError):
            run_experiment(config, output_dir=str(tmp_path), db=db_session, run_id="broken")
        row = db_session.query(ExperimentRun).filter(ExperimentRun.run_id == "broken").one()
        assert row.status == "failed"
        assert row.error


@pytest.mark.slow
def test_kappa_zero_scenario_desk_scale(tmp_path):
    config = scenario_config("bayes-kappa0", {"seeds": [0, 1], "training": {"epochs": 20}})
    report = run_experiment(config, output_dir=str(tmp_path), run_id="bayes-kappa0")
    assert len(report.cells) == 3
    bayes_auc = report.cells["bayes-kappa0__bayes"]["auc"]["mean"]
    assert 0.40 <= bayes_auc <= 0.65
