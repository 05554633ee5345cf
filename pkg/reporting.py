import hashlib
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd
from fire import Fire
from pydantic import BaseModel, validator

from data_process import NUM_CLASSES
from errors import MissingInputError

logger = logging.getLogger(__name__)

DATASETS = ["mnist", "gtsrb", "pubfig"]
GRID = [0.1, 0.2, 0.3, 0.4]
MISSING = "-"
ATTACK_TABLES = dict(
    finetune="DSN against Fine-tuning Attack",
    prune="DSN against Model-pruning Attack",
    transfer="DSN against Transfer-learning Attack",
    overwrite="DSN against Overwriting Attack",
)


class EvalRow(BaseModel):
    model_id: str
    stage: str  # teacher or packaged
    dataset: str
    checkpoint_hash: str
    split: str = "test"
    num_classes: int
    acc_with_sn: Optional[float] = None
    acc_without_sn: float

    @validator("acc_with_sn", "acc_without_sn")
    def check_accuracy(cls, v):
        if v is not None and not 0.0 <= v <= 100.0:
            raise ValueError("accuracies must lie in [0, 100]")
        return v

    def save(self, path: str):
        Path(path).parent.mkdir(exist_ok=True, parents=True)
        with open(path, "w") as f:
            f.write(self.json(indent=2, sort_keys=True) + "\n")


class EvalReport(BaseModel):
    rows: List[EvalRow] = []
    attack_tables: Dict[str, List[Dict[str, str]]] = {}
    random_guess: Dict[str, float] = {}
    environment: Dict[str, str] = {}

    def summary_table(self) -> List[Dict[str, str]]:
        """Teacher A_X, student A_X+K and student A_X per dataset, '-' where absent."""
        table = []
        for dataset in DATASETS:
            teachers = [r for r in self.rows if r.dataset == dataset and r.stage == "teacher"]
            students = [r for r in self.rows if r.dataset == dataset and r.stage == "packaged"]
            teacher = fmt(teachers[0].acc_without_sn) if teachers else MISSING
            for student in students or [None]:
                table.append(
                    {
                        "Task": dataset.upper(),
                        "Model": student.model_id if student else MISSING,
                        "Teacher A_X": teacher,
                        "Student A_X+K": fmt(student.acc_with_sn) if student else MISSING,
                        "Student A_X": fmt(student.acc_without_sn) if student else MISSING,
                        "Random 1/N": fmt(self.random_guess.get(dataset)),
                    }
                )
        return table

    def tables(self) -> Dict[str, List[Dict[str, str]]]:
        tables = {"Model Accuracy with/without SN": self.summary_table()}
        for kind, title in ATTACK_TABLES.items():
            if kind in self.attack_tables:
                tables[title] = self.attack_tables[kind]
        return tables

    def to_markdown(self) -> str:
        lines = []
        for title, rows in self.tables().items():
            lines.append(f"## {title}")
            lines.append("")
            table = pd.DataFrame(rows).to_markdown(
                index=False, stralign="left", disable_numparse=True
            )
            lines.append(table)
            lines.append("")
        lines.append("## Environment")
        lines.append("")
        for key, value in sorted(self.environment.items()):
            lines.append(f"- {key}: {value}")
        return "\n".join(lines) + "\n"

    def save(self, folder: str):
        """Writes report.md, report.json and one CSV per table."""
        path = Path(folder)
        path.mkdir(exist_ok=True, parents=True)
        with open(path / "report.md", "w") as f:
            f.write(self.to_markdown())
        with open(path / "report.json", "w") as f:
            f.write(self.json(indent=2, sort_keys=True) + "\n")
        for title, rows in self.tables().items():
            name = title.lower().replace("/", "_").replace(" ", "_")
            pd.DataFrame(rows).to_csv(path / f"{name}.csv", index=False)


def fmt(value: Optional[float]) -> str:
    if value is None or value != value:
        return MISSING
    return f"{value:.1f}"


def grid_label(value: float) -> str:
    return f"{round(value * 100)}%"


def read_json(path: Path) -> dict:
    with open(path) as f:
        return json.load(f)


def student_columns(rows: List[EvalRow], dataset: str) -> Dict[str, str]:
    students = sorted(
        (r for r in rows if r.dataset == dataset and r.stage == "packaged"),
        key=lambda r: r.model_id,
    )
    if not students:
        return {"Student A_X+K": MISSING, "Student A_X": MISSING}
    return {
        "Student A_X+K": fmt(students[0].acc_with_sn),
        "Student A_X": fmt(students[0].acc_without_sn),
    }


def attack_cell(kind: str, summary: dict) -> str:
    if kind == "prune":
        return f"{fmt(summary.get('acc_with_sn'))} / {fmt(summary.get('acc_raw'))}"
    if kind == "overwrite":
        return fmt(summary.get("acc_new_sn"))
    return fmt(summary.get("acc_raw"))


def attack_table(kind: str, summaries: List[dict], rows: List[EvalRow]) -> List[Dict[str, str]]:
    """Rows per dataset, columns per fraction (ratio for pruning).

    Fine-tuning and transfer tables carry a '<DATASET>*' row for the scratch
    baseline whose student columns are '-'.
    """
    key = "ratio" if kind == "prune" else "fraction"
    row_kinds = [(kind, "")]
    if kind in ("finetune", "transfer"):
        row_kinds.append(("scratch_baseline", "*"))

    datasets = sorted({s.get("dataset", "") for s in summaries if s["attack_kind"] == kind})
    table = []
    for dataset in datasets:
        for row_kind, suffix in row_kinds:
            cells = {
                s[key]: s
                for s in summaries
                if s["attack_kind"] == row_kind
                and s.get("dataset", "") == dataset
                and s.get(key) is not None
            }
            row = {"Task": dataset.upper() + suffix}
            if suffix:
                row.update({"Student A_X+K": MISSING, "Student A_X": MISSING})
            else:
                row.update(student_columns(rows, dataset))
            for value in GRID:
                match = [s for v, s in cells.items() if abs(v - value) < 1e-9]
                row[grid_label(value)] = attack_cell(row_kind, match[0]) if match else MISSING
            table.append(row)
    return table


def config_hash(run_directory: Path) -> str:
    snapshot = run_directory / "config.snapshot"
    if not snapshot.exists():
        return MISSING
    return hashlib.sha256(snapshot.read_bytes()).hexdigest()


def build_report(run_directory: str) -> EvalReport:
    """Collects metrics/eval_*.json rows and attack summary.json files below a run directory.

    Output depends only on the file contents, so re-running on an unchanged
    directory gives identical tables.
    """
    root = Path(run_directory)
    if not root.is_dir():
        raise MissingInputError(f"run directory {root} does not exist")

    rows = [EvalRow(**read_json(p)) for p in sorted(root.glob("**/eval_*.json"))]
    rows = sorted(rows, key=lambda r: (r.dataset, r.stage, r.model_id))
    summaries = [read_json(p) for p in sorted(root.glob("**/summary.json"))]

    attack_tables = {}
    for kind in ATTACK_TABLES:
        if any(s.get("attack_kind") == kind for s in summaries):
            attack_tables[kind] = attack_table(kind, summaries, rows)

    environment = dict(config_hash=config_hash(root))
    manifest = root / "manifest.json"
    if manifest.exists():
        seeds = read_json(manifest).get("seeds", {})
        environment.update({f"seed_{k}": str(v) for k, v in sorted(seeds.items())})
    for row in rows:
        environment[f"checkpoint_{row.model_id}"] = row.checkpoint_hash

    report = EvalReport(
        rows=rows,
        attack_tables=attack_tables,
        random_guess={k: 100.0 / v for k, v in NUM_CLASSES.items()},
        environment=environment,
    )
    logger.info(str(dict(report=str(root), rows=len(rows), attacks=sorted(attack_tables))))
    return report


def main(run_directory: str, out: str = ""):
    report = build_report(run_directory)
    report.save(out or str(Path(run_directory) / "reports"))
    print(report.to_markdown())


"""
p reporting.py main runs/mnist
"""


if __name__ == "__main__":
    Fire(main)
