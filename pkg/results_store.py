import sqlite3
import json
import time
import logging
from typing import List, Dict, Optional
from config import Config

try:
    import redis
    REDIS_AVAILABLE = True
except ImportError:
    REDIS_AVAILABLE = False
    logging.warning("Redis not available, falling back to SQLite")

RUN_TTL_S = 30 * 86400


class ResultsStore:
    """Ledger of CLI runs: what was run, with which seed, and the headline numbers"""

    def __init__(self, backend: Optional[str] = None, db_path: Optional[str] = None):
        self.logger = logging.getLogger(__name__)
        self.db_type = backend or Config.RESULTS_BACKEND
        self.db_path = db_path or Config.RESULTS_DB_PATH

        if self.db_type == 'redis' and REDIS_AVAILABLE:
            self._init_redis()
        else:
            self.db_type = 'sqlite'
            self._init_sqlite()

    def _init_redis(self):
        """Initialize Redis connection"""
        try:
            self.redis_client = redis.Redis(
                host=Config.REDIS_HOST,
                port=Config.REDIS_PORT,
                db=Config.REDIS_DB,
                password=Config.REDIS_PASSWORD,
                decode_responses=True
            )
            self.redis_client.ping()
            self.logger.info("Connected to Redis results store")
        except Exception as e:
            self.logger.error(f"Failed to connect to Redis: {e}")
            self.logger.info("Falling back to SQLite")
            self.db_type = 'sqlite'
            self._init_sqlite()

    def _init_sqlite(self):
        """Initialize SQLite database"""
        try:
            self.conn = sqlite3.connect(self.db_path, check_same_thread=False)
            self.conn.row_factory = sqlite3.Row
            self._create_tables()
            self.logger.info(f"Connected to SQLite results store at {self.db_path}")
        except Exception as e:
            self.logger.error(f"Failed to initialize SQLite: {e}")
            raise

    def _create_tables(self):
        cursor = self.conn.cursor()
        cursor.execute('''
            CREATE TABLE IF NOT EXISTS runs (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                command TEXT NOT NULL,
                seed INTEGER,
                params TEXT NOT NULL,
                output_dir TEXT,
                summary TEXT,
                host TEXT,
                created_at REAL NOT NULL
            )
        ''')
        cursor.execute('''
            CREATE INDEX IF NOT EXISTS idx_runs_created_at
            ON runs(created_at)
        ''')
        self.conn.commit()

    def record_run(self, manifest: Dict, summary: Dict, host: Optional[Dict] = None) -> bool:
        """Store one finished run"""
        record = {
            'command': manifest.get('command', 'unknown'),
            'seed': manifest.get('seed'),
            'params': json.dumps(manifest.get('params', {}), sort_keys=True),
            'output_dir': manifest.get('output_dir', ''),
            'summary': json.dumps(summary, sort_keys=True),
            'host': json.dumps(host or {}, sort_keys=True),
            'created_at': time.time(),
        }
        try:
            if self.db_type == 'redis':
                return self._record_redis(record)
            else:
                return self._record_sqlite(record)
        except Exception as e:
            self.logger.error(f"Failed to record run: {e}")
            return False

    def _record_redis(self, record: Dict) -> bool:
        run_id = f"run:{int(record['created_at'] * 1000)}"
        data = dict(record)
        data['seed'] = '' if record['seed'] is None else record['seed']
        self.redis_client.hset(run_id, mapping=data)
        self.redis_client.expire(run_id, RUN_TTL_S)
        return True

    def _record_sqlite(self, record: Dict) -> bool:
        cursor = self.conn.cursor()
        cursor.execute(
            'INSERT INTO runs (command, seed, params, output_dir, summary, host, created_at) '
            'VALUES (?, ?, ?, ?, ?, ?, ?)',
            (record['command'], record['seed'], record['params'], record['output_dir'],
             record['summary'], record['host'], record['created_at'])
        )
        self.conn.commit()
        return True

    def get_recent_runs(self, limit: int = 10) -> List[Dict]:
        """Most recent runs first"""
        try:
            if self.db_type == 'redis':
                return self._recent_redis(limit)
            else:
                return self._recent_sqlite(limit)
        except Exception as e:
            self.logger.error(f"Failed to get recent runs: {e}")
            return []

    @staticmethod
    def _decode(data: Dict, run_id) -> Dict:
        seed = data.get('seed')
        return {
            'id': run_id,
            'command': data['command'],
            'seed': int(seed) if seed not in (None, '') else None,
            'params': json.loads(data['params']),
            'output_dir': data.get('output_dir') or '',
            'summary': json.loads(data['summary'] or '{}'),
            'created_at': float(data['created_at']),
        }

    def _recent_redis(self, limit: int) -> List[Dict]:
        runs = []
        for key in self.redis_client.keys("run:*"):
            data = self.redis_client.hgetall(key)
            if data:
                runs.append(self._decode(data, key))
        runs.sort(key=lambda r: r['created_at'], reverse=True)
        return runs[:limit]

    def _recent_sqlite(self, limit: int) -> List[Dict]:
        cursor = self.conn.cursor()
        cursor.execute('SELECT * FROM runs ORDER BY created_at DESC, id DESC LIMIT ?', (int(limit),))
        return [self._decode(dict(row), row['id']) for row in cursor.fetchall()]

    def get_stats(self) -> Dict:
        """Run counts per command"""
        try:
            if self.db_type == 'redis':
                commands = [self.redis_client.hget(key, 'command') for key in self.redis_client.keys("run:*")]
            else:
                cursor = self.conn.cursor()
                cursor.execute('SELECT command FROM runs')
                commands = [row['command'] for row in cursor.fetchall()]
        except Exception as e:
            self.logger.error(f"Failed to get stats: {e}")
            return {}

        by_command: Dict[str, int] = {}
        for command in commands:
            by_command[command] = by_command.get(command, 0) + 1
        return {
            'run_count': len(commands),
            'by_command': by_command,
            'database_type': self.db_type
        }

    def close(self):
        """Close database connections"""
        if self.db_type == 'redis' and hasattr(self, 'redis_client'):
            self.redis_client.close()
        elif hasattr(self, 'conn'):
            self.conn.close()
