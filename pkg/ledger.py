"""
Ledger module for boxboost
Records pipeline stage runs and record lineage in SQLite
"""

import json
import logging
import os
import sqlite3
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional

from errors import DataIOError, ParameterError

logger = logging.getLogger(__name__)

LEDGER_NAME = "ledger.sqlite"
ROLES = ("trained", "rejected")


@dataclass
class RunRecord:
    """One executed pipeline stage"""

    stage: str
    config_hash: str
    config: Dict = field(default_factory=dict)
    inputs: Dict = field(default_factory=dict)
    outputs: Dict = field(default_factory=dict)
    metrics: Dict = field(default_factory=dict)
    id: Optional[int] = None

    def output(self, key: str) -> str:
        if key not in self.outputs:
            raise DataIOError(f"Run {self.id} of stage '{self.stage}' has no output '{key}'")
        return self.outputs[key]

    def outputs_exist(self) -> bool:
        """True when every output path recorded by the run is still on disk"""
        paths = []
        for value in self.outputs.values():
            paths += value if isinstance(value, list) else [value]
        return all(os.path.exists(p) for p in paths if isinstance(p, str))


def _dumps(value: Dict) -> str:
    return json.dumps(value, sort_keys=True)


class RunLedger:
    """Manages the runs and lineage tables of one run directory"""

    def __init__(self, db_name: str = LEDGER_NAME):
        """Open (creating if needed) the ledger database"""
        self.db_name = db_name
        self.conn = None
        self.cursor = None
        self.connect()
        self.create_tables()

    def connect(self):
        """Establish connection to the ledger database"""
        directory = os.path.dirname(os.fspath(self.db_name))
        if directory:
            os.makedirs(directory, exist_ok=True)
        try:
            self.conn = sqlite3.connect(self.db_name)
        except sqlite3.Error as e:
            raise DataIOError(f"Cannot open ledger '{self.db_name}': {e}")
        self.conn.row_factory = sqlite3.Row
        self.cursor = self.conn.cursor()

    def create_tables(self):
        """Create the runs and lineage tables if they don't exist"""
        self.cursor.execute("""
            CREATE TABLE IF NOT EXISTS runs (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                stage TEXT NOT NULL,
                config_hash TEXT NOT NULL,
                config TEXT NOT NULL,
                inputs TEXT NOT NULL,
                outputs TEXT NOT NULL,
                metrics TEXT NOT NULL,
                created_at TEXT DEFAULT CURRENT_TIMESTAMP,
                UNIQUE (stage, config_hash)
            )
        """)

        # Which records a run consumed, and in which role
        self.cursor.execute("""
            CREATE TABLE IF NOT EXISTS lineage (
                run_id INTEGER NOT NULL REFERENCES runs(id),
                record_id TEXT NOT NULL,
                role TEXT NOT NULL
            )
        """)
        self.cursor.execute("CREATE INDEX IF NOT EXISTS lineage_run ON lineage (run_id, role)")
        self.conn.commit()

    def _to_record(self, row: sqlite3.Row) -> RunRecord:
        return RunRecord(
            stage=row["stage"],
            config_hash=row["config_hash"],
            config=json.loads(row["config"]),
            inputs=json.loads(row["inputs"]),
            outputs=json.loads(row["outputs"]),
            metrics=json.loads(row["metrics"]),
            id=row["id"],
        )

    def record_run(self, record: RunRecord) -> RunRecord:
        """Store a finished run, replacing an earlier run of the same stage and config hash"""
        previous = self.find_run(record.stage, record.config_hash)
        if previous is not None:
            self.cursor.execute("DELETE FROM lineage WHERE run_id = ?", (previous.id,))
            self.cursor.execute("DELETE FROM runs WHERE id = ?", (previous.id,))
        self.cursor.execute("""
            INSERT INTO runs (stage, config_hash, config, inputs, outputs, metrics)
            VALUES (?, ?, ?, ?, ?, ?)
        """, (record.stage, record.config_hash, _dumps(record.config), _dumps(record.inputs),
              _dumps(record.outputs), _dumps(record.metrics)))
        self.conn.commit()
        record.id = self.cursor.lastrowid
        logger.debug(f"Ledger: run {record.id} stage={record.stage} hash={record.config_hash[:12]}")
        return record

    def find_run(self, stage: str, config_hash: str) -> Optional[RunRecord]:
        """Get the run of a stage with this config hash, or None"""
        self.cursor.execute(
            "SELECT * FROM runs WHERE stage = ? AND config_hash = ?", (stage, config_hash)
        )
        row = self.cursor.fetchone()
        return self._to_record(row) if row else None

    def latest_run(self, stage: str) -> Optional[RunRecord]:
        """Get the most recently recorded run of a stage"""
        self.cursor.execute("SELECT * FROM runs WHERE stage = ? ORDER BY id DESC LIMIT 1", (stage,))
        row = self.cursor.fetchone()
        return self._to_record(row) if row else None

    def runs(self, stage: Optional[str] = None) -> List[RunRecord]:
        """Get all runs in insertion order, optionally of one stage"""
        if stage:
            self.cursor.execute("SELECT * FROM runs WHERE stage = ? ORDER BY id", (stage,))
        else:
            self.cursor.execute("SELECT * FROM runs ORDER BY id")
        return [self._to_record(row) for row in self.cursor.fetchall()]

    def add_lineage(self, run_id: int, record_ids: Iterable[str], role: str) -> int:
        """Attach manifest record ids to a run; returns the number of rows added"""
        if role not in ROLES:
            raise ParameterError(f"Lineage role must be one of {ROLES}, got {role!r}")
        rows = [(run_id, record_id, role) for record_id in record_ids]
        self.cursor.executemany(
            "INSERT INTO lineage (run_id, record_id, role) VALUES (?, ?, ?)", rows
        )
        self.conn.commit()
        return len(rows)

    def lineage_for(self, run_id: int, role: str) -> List[str]:
        """Get the record ids attached to a run in one role"""
        self.cursor.execute(
            "SELECT record_id FROM lineage WHERE run_id = ? AND role = ? ORDER BY rowid",
            (run_id, role),
        )
        return [row["record_id"] for row in self.cursor.fetchall()]

    def close(self):
        """Close database connection"""
        if self.conn:
            self.conn.close()
            self.conn = None

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()
