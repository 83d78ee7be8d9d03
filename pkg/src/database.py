"""
Run ledger: one sqlite row per command invocation plus its reported metrics.
"""
import json
import os
import sqlite3
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

LEDGER_NAME = "runs.db"
THREAD_VARIABLES = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def thread_settings() -> Dict[str, str]:
    """BLAS/OpenMP thread settings of the current process, recorded with each run."""
    return {name: os.environ[name] for name in THREAD_VARIABLES if name in os.environ}


class RunLedger:
    def __init__(self, db_path: str | Path = LEDGER_NAME):
        self.db_path = str(db_path)
        Path(self.db_path).parent.mkdir(parents=True, exist_ok=True)
        self.init_database()

    def init_database(self):
        """Initialize ledger tables"""
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()

        cursor.execute("""
            CREATE TABLE IF NOT EXISTS runs (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                command TEXT NOT NULL,
                config_json TEXT NOT NULL,
                threads_json TEXT,
                status TEXT DEFAULT 'running',
                exit_code INTEGER,
                message TEXT,
                started_at TEXT NOT NULL,
                finished_at TEXT
            )
        """)

        cursor.execute("""
            CREATE TABLE IF NOT EXISTS metrics (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                run_id INTEGER NOT NULL,
                name TEXT NOT NULL,
                value REAL NOT NULL,
                FOREIGN KEY (run_id) REFERENCES runs(id)
            )
        """)
        cursor.execute("""
            CREATE INDEX IF NOT EXISTS idx_metrics_run
            ON metrics (run_id)
        """)

        conn.commit()
        conn.close()

    def start_run(self, command: str, config: Dict[str, Any]) -> int:
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()
        cursor.execute(
            "INSERT INTO runs (command, config_json, threads_json, started_at) VALUES (?, ?, ?, ?)",
            (command, json.dumps(config, sort_keys=True, default=list), json.dumps(thread_settings(), sort_keys=True),
             datetime.now().isoformat(timespec="seconds")),
        )
        run_id = cursor.lastrowid
        conn.commit()
        conn.close()
        return run_id

    def finish_run(self, run_id: int, exit_code: int, message: str = ""):
        status = "ok" if exit_code == 0 else "failed"
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()
        cursor.execute(
            "UPDATE runs SET status = ?, exit_code = ?, message = ?, finished_at = ? WHERE id = ?",
            (status, exit_code, message, datetime.now().isoformat(timespec="seconds"), run_id),
        )
        conn.commit()
        conn.close()

    def record_metrics(self, run_id: int, values: Dict[str, float]):
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()
        cursor.executemany(
            "INSERT INTO metrics (run_id, name, value) VALUES (?, ?, ?)",
            [(run_id, name, float(value)) for name, value in values.items()],
        )
        conn.commit()
        conn.close()

    def get_runs(self, limit: int = 10, command: Optional[str] = None, status: Optional[str] = None) -> List[Dict]:
        """Most recent runs first"""
        conn = sqlite3.connect(self.db_path)
        conn.row_factory = sqlite3.Row
        cursor = conn.cursor()

        query = "SELECT * FROM runs"
        filters, values = [], []
        if command:
            filters.append("command = ?")
            values.append(command)
        if status:
            filters.append("status = ?")
            values.append(status)
        if filters:
            query += " WHERE " + " AND ".join(filters)
        query += " ORDER BY id DESC LIMIT ?"
        values.append(limit)

        cursor.execute(query, values)
        rows = [dict(row) for row in cursor.fetchall()]
        conn.close()
        return rows

    def get_metrics(self, run_id: int) -> Dict[str, float]:
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()
        cursor.execute("SELECT name, value FROM metrics WHERE run_id = ? ORDER BY id", (run_id,))
        rows = cursor.fetchall()
        conn.close()
        return {name: value for name, value in rows}
