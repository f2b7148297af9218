import json

from sqlalchemy import Column, Integer, String, Text, ForeignKey, DateTime, Float
from sqlalchemy.orm import relationship
from sqlalchemy.sql import func
from database import Base


class ExperimentRun(Base):
    __tablename__ = "experiment_runs"

    run_id = Column(String(64), primary_key=True, index=True)
    scenario = Column(String(50), nullable=True, index=True)
    config_hash = Column(String(64), nullable=False, index=True)
    status = Column(String(20), nullable=False, default="pending", index=True)  # pending, running, finished, failed
    seeds = Column(Text, nullable=False)  # JSON list
    mean_auc_json = Column(Text, nullable=True)  # {"<cell>": mean AUC}
    output_dir = Column(String(500), nullable=True)
    error = Column(Text, nullable=True)
    created_at = Column(DateTime, server_default=func.now())
    finished_at = Column(DateTime, nullable=True)

    cells = relationship("CellResult", back_populates="run", cascade="all, delete-orphan")

    def to_dict(self, with_cells: bool = False) -> dict:
        payload = {
            "run_id": self.run_id,
            "scenario": self.scenario,
            "config_hash": self.config_hash,
            "status": self.status,
            "seeds": json.loads(self.seeds) if self.seeds else [],
            "mean_auc": json.loads(self.mean_auc_json) if self.mean_auc_json else {},
            "output_dir": self.output_dir,
            "error": self.error,
            "created_at": self.created_at.isoformat() if self.created_at else None,
            "finished_at": self.finished_at.isoformat() if self.finished_at else None,
        }
        if with_cells:
            payload["cells"] = [cell.to_dict() for cell in self.cells]
        return payload


class CellResult(Base):
    __tablename__ = "cell_results"

    cell_result_id = Column(Integer, primary_key=True, index=True, autoincrement=True)
    run_id = Column(String(64), ForeignKey("experiment_runs.run_id", ondelete="CASCADE"), nullable=False, index=True)
    cell = Column(String(200), nullable=False)
    attacker = Column(String(50), nullable=True)
    defense = Column(String(100), nullable=False)
    auc_mean = Column(Float, nullable=True)
    auc_std = Column(Float, nullable=True)
    utility_loss = Column(Float, nullable=True)

    run = relationship("ExperimentRun", back_populates="cells")

    def to_dict(self) -> dict:
        return {
            "cell": self.cell,
            "attacker": self.attacker,
            "defense": self.defense,
            "auc_mean": self.auc_mean,
            "auc_std": self.auc_std,
            "utility_loss": self.utility_loss,
        }
