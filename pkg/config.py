import os
from dotenv import load_dotenv
import logging

import psutil

# Load environment variables
try:
    load_dotenv()
except Exception as e:
    print(f"Warning: Could not load .env file: {e}")
    print("Please ensure your .env file exists and is properly formatted.")

def _default_threads() -> str:
    try:
        return str(psutil.cpu_count(logical=False) or 1)
    except Exception:
        return '1'

class Config:
    # Logging Configuration
    LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')
    LOG_FILE = os.getenv('LOG_FILE', 'rydberg_bench.log')
    LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

    # Results Store Configuration
    RESULTS_BACKEND = os.getenv('RESULTS_BACKEND', 'sqlite')  # 'sqlite' or 'redis'
    RESULTS_DB_PATH = os.getenv('RESULTS_DB_PATH', 'rydberg_bench.db')
    REDIS_HOST = os.getenv('REDIS_HOST', 'localhost')
    REDIS_PORT = int(os.getenv('REDIS_PORT', '6379'))
    REDIS_DB = int(os.getenv('REDIS_DB', '0'))
    REDIS_PASSWORD = os.getenv('REDIS_PASSWORD')

    # Notification Configuration
    NOTIFY_WEBHOOK_URL = os.getenv('NOTIFY_WEBHOOK_URL')
    NOTIFY_TIMEOUT = int(os.getenv('NOTIFY_TIMEOUT', '30'))
    NOTIFY_RETRY_ATTEMPTS = int(os.getenv('NOTIFY_RETRY_ATTEMPTS', '3'))

    # Simulation Configuration
    STEPS_PER_GATE = int(os.getenv('STEPS_PER_GATE', '2000'))
    STEPS_PER_RABI_PERIOD = int(os.getenv('STEPS_PER_RABI_PERIOD', '50'))
    TRAJECTORY_CHUNK = int(os.getenv('TRAJECTORY_CHUNK', '64'))
    GATE_TRAJECTORIES = int(os.getenv('GATE_TRAJECTORIES', '500000'))
    CIRCUIT_TRAJECTORIES = int(os.getenv('CIRCUIT_TRAJECTORIES', '10000'))
    DEFAULT_THREADS = int(os.getenv('DEFAULT_THREADS', _default_threads()))
    RISE_TIME_S = float(os.getenv('RISE_TIME_S', '150e-9'))  # gate beam AOM rise/fall
    MAX_JUMP_PROBABILITY = 0.01  # Gamma_max * dt bound

    # Calibration Configuration
    CALIBRATION_TOL = float(os.getenv('CALIBRATION_TOL', '1e-7'))
    CALIBRATION_MAX_RESTARTS = int(os.getenv('CALIBRATION_MAX_RESTARTS', '4'))
    CALIBRATION_MAX_ITER = int(os.getenv('CALIBRATION_MAX_ITER', '4000'))
    # (A, omega_m/Omega, offset, Delta/Omega, Omega*T) rough starting point
    CALIBRATION_GUESS = (0.70, 1.04, 0.73, 0.0, 7.6)

    # FRT Configuration
    FRT_MAX_POINTS = int(os.getenv('FRT_MAX_POINTS', '1024'))
    FRT_N_FREQS = int(os.getenv('FRT_N_FREQS', '512'))
    FRT_F_MIN_HZ = float(os.getenv('FRT_F_MIN_HZ', '1e3'))
    FRT_BAND_HZ = float(os.getenv('FRT_BAND_HZ', '250e3'))

    # SSB Configuration
    SSB_N = int(os.getenv('SSB_N', '10'))
    SSB_NCZ = os.getenv('SSB_NCZ', '2:10')
    SSB_MIN_UNCERTAINTY = float(os.getenv('SSB_MIN_UNCERTAINTY', '1e-6'))

    # Output Configuration
    OUTPUT_DIR = os.getenv('OUTPUT_DIR', 'runs')
    SCHEMA_VERSION = 1
    TOOL_VERSION = '1.0.0'

def setup_logging():
    """Setup logging configuration"""
    logging.basicConfig(
        level=getattr(logging, Config.LOG_LEVEL),
        format=Config.LOG_FORMAT,
        handlers=[
            logging.FileHandler(Config.LOG_FILE),
            logging.StreamHandler()
        ]
    )
    return logging.getLogger(__name__)

def validate_config():
    """Validate numeric and backend settings"""
    positive_vars = [
        'STEPS_PER_GATE',
        'STEPS_PER_RABI_PERIOD',
        'TRAJECTORY_CHUNK',
        'GATE_TRAJECTORIES',
        'CIRCUIT_TRAJECTORIES',
        'DEFAULT_THREADS',
        'FRT_MAX_POINTS',
        'FRT_N_FREQS',
        'CALIBRATION_TOL',
    ]

    invalid_vars = []
    for var in positive_vars:
        if not getattr(Config, var) > 0:
            invalid_vars.append(var)

    if Config.RESULTS_BACKEND not in ('sqlite', 'redis'):
        invalid_vars.append('RESULTS_BACKEND')

    if Config.RISE_TIME_S < 0:
        invalid_vars.append('RISE_TIME_S')

    if invalid_vars:
        raise ValueError(f"Invalid configuration values: {', '.join(invalid_vars)}")

    return True
