#!/usr/bin/env python3
"""
Status report for rydberg_bench: worker capacity, run ledger, output directory and log activity
"""

import os
import sys
import time
from collections import Counter
from datetime import datetime
from typing import Dict, Any, List, Optional

import psutil

from config import Config

RECENT_RUNS = 10
LOG_TAIL = 500
WATCH_INTERVAL_S = 30


def get_host_capacity() -> Dict[str, Any]:
    """Cores, load and free memory as seen by the trajectory workers"""
    physical = psutil.cpu_count(logical=False) or 1
    load_1m = os.getloadavg()[0] if hasattr(os, 'getloadavg') else None
    memory = psutil.virtual_memory()
    return {
        'physical_cores': physical,
        'logical_cores': psutil.cpu_count() or physical,
        'cpu_percent': psutil.cpu_percent(interval=0.5),
        'load_1m': load_1m,
        'memory_available_gb': round(memory.available / 1024 ** 3, 2),
        'memory_percent': memory.percent,
        'oversubscribed': Config.DEFAULT_THREADS > physical,
    }


def get_output_stats(output_dir: str = None) -> Dict[str, Any]:
    """Count run manifests under the default output directory"""
    output_dir = output_dir or Config.OUTPUT_DIR
    if not os.path.isdir(output_dir):
        return {'exists': False, 'path': output_dir}

    manifests = []
    size = 0
    for root, _, files in os.walk(output_dir):
        for name in files:
            path = os.path.join(root, name)
            size += os.path.getsize(path)
            if name.endswith('.manifest.json'):
                manifests.append(path)
    newest = max(manifests, key=os.path.getmtime) if manifests else None
    return {
        'exists': True,
        'path': output_dir,
        'manifests': len(manifests),
        'size_mb': round(size / (1024 * 1024), 2),
        'newest': newest,
    }


def get_log_activity(log_file: str = None) -> Dict[str, Any]:
    """Warnings and errors per module in the tail of the log"""
    log_file = log_file or Config.LOG_FILE
    if not os.path.exists(log_file):
        return {'exists': False}

    try:
        with open(log_file, 'r') as f:
            tail = f.readlines()[-LOG_TAIL:]
    except OSError as e:
        return {'exists': True, 'error': str(e)}

    levels: Counter = Counter()
    noisy_modules: Counter = Counter()
    for line in tail:
        # asctime - name - levelname - message
        parts = line.split(' - ', 3)
        if len(parts) < 4:
            continue
        levels[parts[2]] += 1
        if parts[2] in ('WARNING', 'ERROR'):
            noisy_modules[parts[1]] += 1
    return {
        'exists': True,
        'lines_read': len(tail),
        'levels': dict(levels),
        'noisy_modules': noisy_modules.most_common(3),
        'last_modified': datetime.fromtimestamp(os.path.getmtime(log_file)).isoformat(timespec='seconds'),
    }


def get_store_report(limit: int = RECENT_RUNS) -> Dict[str, Any]:
    """Ledger statistics and the latest runs"""
    try:
        from results_store import ResultsStore

        store = ResultsStore()
        report = {'stats': store.get_stats(), 'recent': store.get_recent_runs(limit)}
        store.close()
        return report
    except Exception as e:
        return {'error': str(e)}


def format_run(run: Dict[str, Any]) -> str:
    stamp = datetime.fromtimestamp(run['created_at']).strftime('%Y-%m-%d %H:%M:%S')
    headline = ', '.join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                         for k, v in list(run['summary'].items())[:3])
    line = f"{stamp}  {run['command']:<18} seed={run['seed']}  {headline}"
    return line if len(line) <= 100 else line[:97] + "..."


def print_status():
    print("=" * 60)
    print(f"Rydberg Bench {Config.TOOL_VERSION} status at {datetime.now().isoformat(timespec='seconds')}")
    print("=" * 60)

    host = get_host_capacity()
    print("🖥️  Workers:")
    print(f"  {Config.DEFAULT_THREADS} threads on {host['physical_cores']} physical "
          f"/ {host['logical_cores']} logical cores")
    if host['oversubscribed']:
        print("  ✗ DEFAULT_THREADS exceeds the physical cores")
    load = f", load {host['load_1m']:.2f}" if host['load_1m'] is not None else ""
    print(f"  CPU {host['cpu_percent']}%{load}, "
          f"{host['memory_available_gb']} GB free ({host['memory_percent']}% used)")
    print()

    print("🗄️  Run Ledger:")
    report = get_store_report()
    if 'error' in report:
        print(f"  ✗ Error reading results store: {report['error']}")
    else:
        stats = report['stats']
        print(f"  {stats.get('run_count', 0)} runs in {stats.get('database_type', 'unknown')}")
        for command, count in sorted(stats.get('by_command', {}).items()):
            print(f"    {command}: {count}")
        runs: List[Dict[str, Any]] = report['recent']
        for run in runs:
            print(f"  {format_run(run)}")
    print()

    print("📁 Outputs:")
    outputs = get_output_stats()
    if outputs['exists']:
        print(f"  {outputs['manifests']} manifests, {outputs['size_mb']} MB in {outputs['path']}")
        if outputs['newest']:
            print(f"  Newest: {outputs['newest']}")
    else:
        print(f"  • {outputs['path']} does not exist yet")
    print()

    print("📝 Log:")
    activity = get_log_activity()
    if not activity['exists']:
        print("  ✗ Log file not found")
    elif 'error' in activity:
        print(f"  ✗ Error reading log: {activity['error']}")
    else:
        counts = ', '.join(f"{level} {n}" for level, n in sorted(activity['levels'].items())) or 'empty'
        print(f"  Last {activity['lines_read']} lines: {counts}")
        for module, n in activity['noisy_modules']:
            print(f"    {module}: {n} warnings/errors")
        print(f"  Last modified: {activity['last_modified']}")

    print("=" * 60)


def watch_status(interval: float = WATCH_INTERVAL_S, cycles: Optional[int] = None) -> int:
    """Repeat the report every interval seconds until Ctrl+C, or for a fixed number of cycles"""
    print("Starting continuous monitoring (Ctrl+C to stop)...")
    shown = 0
    try:
        while cycles is None or shown < cycles:
            if shown:
                time.sleep(interval)
            if sys.stdout.isatty():
                os.system('clear' if os.name == 'posix' else 'cls')
            print_status()
            shown += 1
    except KeyboardInterrupt:
        print("\nMonitoring stopped.")
    return shown


if __name__ == "__main__":
    if len(sys.argv) > 1 and sys.argv[1] == '--watch':
        watch_status()
    else:
        print_status()
