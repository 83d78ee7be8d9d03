import argparse
import json
import sqlite3


def parse_args():
    parser = argparse.ArgumentParser(description="Show recent entries from the celltraffic run ledger.")
    parser.add_argument("--limit", type=int, default=10, help="Number of rows to display (default: 10)")
    parser.add_argument("--command", help="Filter by subcommand (ingest, graph, classify, ...)")
    parser.add_argument("--status", choices=["running", "ok", "failed"], help="Filter by run status")
    parser.add_argument("--metrics", action="store_true", help="Also print the metrics of each run")
    parser.add_argument("--path", default="out/runs.db", help="Ledger file path")
    return parser.parse_args()


def main():
    args = parse_args()
    conn = sqlite3.connect(args.path)
    cursor = conn.cursor()
    query = """
        SELECT id, command, status, exit_code, started_at, finished_at, config_json
        FROM runs
    """
    filters = []
    values = []
    if args.command:
        filters.append("command = ?")
        values.append(args.command)
    if args.status:
        filters.append("status = ?")
        values.append(args.status)
    if filters:
        query += " WHERE " + " AND ".join(filters)
    query += " ORDER BY id DESC LIMIT ?"
    values.append(args.limit)

    cursor.execute(query, values)
    rows = cursor.fetchall()

    if not rows:
        conn.close()
        print("No rows found.")
        return

    for run_id, command, status, exit_code, started_at, finished_at, config_json in rows:
        seed = json.loads(config_json).get("seed")
        print(f"{started_at} | run={run_id} {command} status={status} exit={exit_code} seed={seed} finished={finished_at}")
        if args.metrics:
            cursor.execute("SELECT name, value FROM metrics WHERE run_id = ? ORDER BY id", (run_id,))
            for name, value in cursor.fetchall():
                print(f"    {name} = {value:.6g}")
    conn.close()


if __name__ == "__main__":
    main()
