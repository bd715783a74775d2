from pathlib import Path
from typing import Mapping, Optional, Union
import logging

import pandas as pd

from .config import settings
from .exceptions import DomainError
from .rct import HISTORY_COLUMNS, BitwidthHistory
from .schemas import RunMeta, RunReport

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

FINAL_BITWIDTH_COLUMNS = ["layer", "n_params", "bitwidth"]


def ensure_dir(path: PathLike) -> Path:
    """Crear el directorio de salida si no existe"""
    directory = Path(path)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        logger.error(f"No se pudo crear el directorio {directory}: {e}")
        raise
    return directory


def _write_csv(frame: pd.DataFrame, path: PathLike) -> Path:
    path = Path(path)
    try:
        frame.to_csv(path, index=False, lineterminator="\n", encoding="utf-8")
    except OSError as e:
        logger.error(f"Error al escribir {path}: {e}")
        raise
    logger.info(f"CSV escrito: {path} ({len(frame)} filas)")
    return path


def _write_text(text: str, path: PathLike) -> Path:
    path = Path(path)
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as e:
        logger.error(f"Error al escribir {path}: {e}")
        raise
    logger.info(f"Archivo escrito: {path}")
    return path


# ==================== HISTORIAL DE BITWIDTH ====================

def write_history_csv(history: BitwidthHistory, path: PathLike) -> Path:
    """step,layer,bitwidth,gavg con gavg en precisión completa (repr de ida y vuelta)"""
    return _write_csv(history.to_frame(), path)


def read_history_frame(path: PathLike) -> pd.DataFrame:
    frame = pd.read_csv(path, float_precision="round_trip", dtype={"layer": str})
    if list(frame.columns) != HISTORY_COLUMNS:
        raise DomainError(f"Cabecera de historial inválida en {path}: {list(frame.columns)}")
    return frame


def read_history_csv(path: PathLike) -> BitwidthHistory:
    return BitwidthHistory.from_frame(read_history_frame(path))


def write_final_bitwidth_csv(param_counts: Mapping[str, int], bitwidths: Mapping[str, int], path: PathLike) -> Path:
    """Tabla de distribución final de bitwidth por tensor"""
    frame = pd.DataFrame(
        [(name, n, bitwidths[name]) for name, n in param_counts.items()],
        columns=FINAL_BITWIDTH_COLUMNS,
    )
    return _write_csv(frame, path)


# ==================== REPORTES ====================

def write_report_json(report: RunReport, path: PathLike) -> Path:
    return _write_text(report.model_dump_json(indent=2) + "\n", path)


def read_report_json(path: PathLike) -> RunReport:
    return RunReport.model_validate_json(Path(path).read_text(encoding="utf-8"))


def write_run_meta(meta: RunMeta, path: PathLike) -> Path:
    return _write_text(meta.model_dump_json(indent=2) + "\n", path)


def read_run_meta(path: PathLike) -> Optional[RunMeta]:
    path = Path(path)
    if not path.exists():
        return None
    return RunMeta.model_validate_json(path.read_text(encoding="utf-8"))


def write_sweep_csv(frame: pd.DataFrame, path: PathLike) -> Path:
    return _write_csv(frame, path)


def run_paths(output_dir: PathLike) -> dict:
    """Rutas de los artefactos de una corrida dentro de output_dir"""
    base = Path(output_dir)
    return {
        "report": base / settings.report_file,
        "history": base / settings.history_file,
        "final_bitwidth": base / settings.final_bitwidth_file,
        "meta": base / settings.run_meta_file,
    }
