from .io import array_digest, read_csv, read_json, write_csv, write_json
from .logger import get_logger
