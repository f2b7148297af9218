"""
services/learn/checkpoint.py - Save and restore trained generator/attacker networks

Layout of a checkpoint directory:
    manifest.json   network specs, q_aux, training config and history
    generator.npz   generator tensors (absent for attacker-only runs)
    attacker.npz    attacker tensors (absent for LRT defenses)
"""

import json
import logging
from pathlib import Path
from typing import Optional, Union

import numpy as np

from services.learn.games import GeneratorMechanism, TrainConfig, TrainingHistory, TrainingResult
from services.learn.nn import Mlp
from utils.exceptions import ConfigError
from utils.io import write_json

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"


def _save_tensors(path: Path, model: Mlp) -> None:
    tmp = path.with_suffix(".tmp.npz")
    np.savez(tmp, **model.state_dict())
    tmp.replace(path)


def _load_tensors(path: Path, spec: dict) -> Mlp:
    model = Mlp.from_spec(spec)
    with np.load(path) as data:
        model.load_state_dict({name: data[name] for name in data.files})
    return model


def save_checkpoint(
    directory: Union[str, Path],
    result: TrainingResult,
    config: Optional[TrainConfig] = None,
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"info": result.info, "history": result.history.rows}
    if config is not None:
        manifest["config"] = config.to_dict()
    if result.generator is not None:
        _save_tensors(directory / "generator.npz", result.generator.model)
        manifest["generator"] = {
            "spec": result.generator.model.to_spec(),
            "num_individuals": result.generator.num_individuals,
            "q_aux": result.generator.q_aux,
        }
    if result.attacker is not None:
        _save_tensors(directory / "attacker.npz", result.attacker)
        manifest["attacker"] = {"spec": result.attacker.to_spec()}
    write_json(directory / MANIFEST, manifest)
    logger.info(f"💾 Saved checkpoint to {directory}")
    return directory


def load_checkpoint(directory: Union[str, Path]) -> TrainingResult:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST).read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise ConfigError(f"cannot read checkpoint manifest: {e}", {"path": str(directory)})

    generator = None
    if "generator" in manifest:
        entry = manifest["generator"]
        model = _load_tensors(directory / "generator.npz", entry["spec"])
        generator = GeneratorMechanism(model, entry["num_individuals"], entry["q_aux"])
    attacker = None
    if "attacker" in manifest:
        attacker = _load_tensors(directory / "attacker.npz", manifest["attacker"]["spec"])
    if generator is None and attacker is None:
        raise ConfigError("checkpoint holds no networks", {"path": str(directory)})

    logger.info(f"📂 Loaded checkpoint from {directory}")
    return TrainingResult(generator, attacker, TrainingHistory(manifest.get("history", [])), manifest.get("info", {}))
