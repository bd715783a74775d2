"""
Línea de comandos: train, sweep-tmin, sweep-init, sweep-batch, gradcheck y report.

Códigos de salida: 0 éxito, 1 fallo de E/S o gradcheck fuera de tolerancia,
2 uso incorrecto o configuración inválida.
"""
from pathlib import Path
from typing import List, Optional, Sequence
import logging
import sys

import click
import typer
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

# Imports locales
from .config import settings
from .accounting import FP32_BITS, two_copy_movement_ratio
from .exceptions import DomainError, IdxParseError, InvalidInputError
from .schemas import (
    Command, GradcheckCommand, ReportCommand, RunReport, SweepBatchCommand,
    SweepInitCommand, SweepTminCommand, TrainCommand, TrainConfig,
)
from . import harness, storage

# Configurar logging
logging.basicConfig(level=settings.effective_log_level)
logger = logging.getLogger(__name__)

console = Console()

app = typer.Typer(
    name="rct",
    help=f"{settings.app_name} v{settings.version}: entrenamiento con bitwidth adaptativo por capa",
    add_completion=False,
    no_args_is_help=True,
    rich_markup_mode=None,
)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

CONFIG_ARG = typer.Argument(..., exists=True, dir_okay=False, help="Configuración JSON de la corrida")
OUTPUT_OPT = typer.Option(Path("out"), "-o", "--output", help="Directorio de artefactos")
SEED_OPT = typer.Option(None, "--seed", min=0, help="Sobrescribe la semilla de la configuración")
POLICY_OFF_OPT = typer.Option(False, "--policy-off", help="Bitwidth fijo (la política solo registra Gavg)")
VALUES_OPT = typer.Option(..., "--values", help="Lista separada por comas")
SEEDS_OPT = typer.Option(settings.sweep_seeds, "--seeds", min=1, help="Semillas por valor (mediana)")
JOBS_OPT = typer.Option(settings.sweep_jobs, "--jobs", min=1, help="Corridas en paralelo")


def _split_values(raw: str, cast) -> List:
    try:
        values = [cast(v.strip()) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise typer.BadParameter(f"Valor no numérico en '{raw}'", param_hint="--values")
    if not values:
        raise typer.BadParameter("Se requiere al menos un valor", param_hint="--values")
    return values


# ==================== SUBCOMANDOS ====================

@app.command("train")
def train_command(
    config: Path = CONFIG_ARG,
    output: Path = OUTPUT_OPT,
    seed: Optional[int] = SEED_OPT,
    policy_off: bool = POLICY_OFF_OPT,
) -> TrainCommand:
    """Entrenar una corrida y escribir report.json y bitwidth_history.csv"""
    return TrainCommand(config_path=config, output_dir=output, seed=seed, policy_off=policy_off)


@app.command("sweep-tmin")
def sweep_tmin_command(
    config: Path = CONFIG_ARG,
    values: str = VALUES_OPT,
    output: Path = OUTPUT_OPT,
    seed: Optional[int] = SEED_OPT,
    policy_off: bool = POLICY_OFF_OPT,
    seeds: int = SEEDS_OPT,
    jobs: int = JOBS_OPT,
) -> SweepTminCommand:
    """Barrido de t_min: precisión, energía y memoria"""
    return SweepTminCommand(config_path=config, values=_split_values(values, float), output_dir=output,
                            seed=seed, policy_off=policy_off, seeds=seeds, jobs=jobs)


@app.command("sweep-init")
def sweep_init_command(
    config: Path = CONFIG_ARG,
    values: str = VALUES_OPT,
    output: Path = OUTPUT_OPT,
    seed: Optional[int] = SEED_OPT,
    policy_off: bool = POLICY_OFF_OPT,
    seeds: int = SEEDS_OPT,
    jobs: int = JOBS_OPT,
) -> SweepInitCommand:
    """Barrido del bitwidth inicial"""
    return SweepInitCommand(config_path=config, values=_split_values(values, int), output_dir=output,
                            seed=seed, policy_off=policy_off, seeds=seeds, jobs=jobs)


@app.command("sweep-batch")
def sweep_batch_command(
    config: Path = CONFIG_ARG,
    values: str = VALUES_OPT,
    output: Path = OUTPUT_OPT,
    seed: Optional[int] = SEED_OPT,
    policy_off: bool = POLICY_OFF_OPT,
    seeds: int = SEEDS_OPT,
    jobs: int = JOBS_OPT,
) -> SweepBatchCommand:
    """Barrido del tamaño de lote"""
    return SweepBatchCommand(config_path=config, values=_split_values(values, int), output_dir=output,
                             seed=seed, policy_off=policy_off, seeds=seeds, jobs=jobs)


@app.command("gradcheck")
def gradcheck_command(config: Path = CONFIG_ARG, seed: Optional[int] = SEED_OPT) -> GradcheckCommand:
    """Comparar gradientes analíticos contra diferencias centrales"""
    return GradcheckCommand(config_path=config, seed=seed)


@app.command("report")
def report_command(
    run_dir: Path = typer.Argument(..., exists=True, file_okay=False, help="Directorio de una corrida terminada"),
) -> ReportCommand:
    """Resumen legible de una corrida terminada"""
    return ReportCommand(run_dir=run_dir)


# ==================== PARSEO ====================

def parse_args(argv: Sequence[str]) -> Command:
    """
    Devuelve el comando validado. Los errores de uso se propagan como
    click.UsageError (exit_code 2); --help termina con click.exceptions.Exit.
    """
    command = typer.main.get_command(app)
    result = command.main(args=list(argv), prog_name="rct", standalone_mode=False)
    if isinstance(result, int):
        # --help imprime la ayuda y devuelve el código de salida
        raise click.exceptions.Exit(result)
    return result


# ==================== EJECUCIÓN ====================

def load_config(path: Path, seed: Optional[int] = None, policy_off: bool = False) -> TrainConfig:
    text = Path(path).read_text(encoding="utf-8")
    return TrainConfig.model_validate_json(text).with_overrides(seed=seed, policy_off=policy_off)


def _seed_list(config: TrainConfig, n: int) -> List[int]:
    return [config.seed + i for i in range(n)]


def _print_frame(title: str, frame) -> None:
    table = Table(title=title)
    for column in frame.columns:
        table.add_column(str(column), justify="right")
    for row in frame.itertuples(index=False):
        table.add_row(*(f"{v:.4g}" if isinstance(v, float) else str(v) for v in row))
    console.print(table)


def _execute_train(cmd: TrainCommand) -> int:
    config = load_config(cmd.config_path, cmd.seed, cmd.policy_off)
    report = harness.run(config, cmd.output_dir)
    console.print(
        f"✅ Corrida terminada: test={report.final_accuracy.test:.4f} "
        f"bitwidth promedio={report.weighted_avg_bitwidth:.3f} -> {cmd.output_dir}"
    )
    return EXIT_OK


def _execute_sweep(cmd) -> int:
    config = load_config(cmd.config_path, cmd.seed, cmd.policy_off)
    sweeps = {
        "sweep-tmin": harness.sweep_tmin,
        "sweep-init": harness.sweep_init_bitwidth,
        "sweep-batch": harness.sweep_batch_size,
    }
    result = sweeps[cmd.kind](config, cmd.values, _seed_list(config, cmd.seeds), cmd.jobs)
    path = harness.write_sweep(result, cmd.output_dir)
    _print_frame(f"{cmd.kind} ({cmd.seeds} semillas)", result.table)
    console.print(f"✅ Tabla escrita en {path}")
    return EXIT_OK


def _execute_gradcheck(cmd: GradcheckCommand) -> int:
    config = load_config(cmd.config_path, cmd.seed)
    error = harness.run_gradcheck(config)
    ok = error <= settings.gradcheck_tolerance
    console.print(f"{'✅' if ok else '❌'} Max relative gradient error: {error:.3e} (tolerancia {settings.gradcheck_tolerance:.0e})")
    return EXIT_OK if ok else EXIT_FAILURE


def summary_table(report: RunReport) -> Table:
    """Tabla de resumen con razones de energía y memoria contra fp32"""
    table = Table(title=f"Corrida seed={report.seed} ({report.config.mode.value}, {report.steps} steps)")
    table.add_column("Métrica")
    table.add_column("Valor", justify="right")
    energy = report.energy
    table.add_row("Precisión train", f"{report.final_accuracy.train:.4f}")
    table.add_row("Precisión test", f"{report.final_accuracy.test:.4f}")
    table.add_row("Bitwidth promedio ponderado", f"{report.weighted_avg_bitwidth:.3f}")
    table.add_row("Memoria vs fp32", f"{report.memory.normalized_vs_fp32:.4f}")
    ratio = "n/a" if energy.gemm_ratio_vs_fp32 is None else f"{energy.gemm_ratio_vs_fp32:.4f}"
    table.add_row("Energía GEMM vs fp32", ratio)
    if energy.fp32_gemm_reference > 0:
        table.add_row("Energía GEMM forward vs fp32", f"{3 * energy.forward_only_gemm / energy.fp32_gemm_reference:.4f}")
    if report.steps > 0:
        # una lectura y una escritura fp32 del modelo por step valen 2.0
        table.add_row("Movimiento vs fp32", f"{energy.movement_fp32_param_equiv / (2 * report.steps):.4f}")
    table.add_row(
        "Movimiento QAT (32+8) / RCT",
        f"{two_copy_movement_ratio(FP32_BITS, 8, report.weighted_avg_bitwidth):.4f}",
    )
    for name, k in report.per_layer_bitwidth.items():
        table.add_row(f"  {name}", f"{k} bits")
    return table


def _execute_report(cmd: ReportCommand) -> int:
    paths = storage.run_paths(cmd.run_dir)
    report = storage.read_report_json(paths["report"])
    history = storage.read_history_csv(cmd.run_dir / report.history_file)
    console.print(summary_table(report))
    last = history.last_bitwidths()
    if last and last != report.per_layer_bitwidth:
        console.print("⚠️  El historial no coincide con los bitwidths finales del reporte")
    meta = storage.read_run_meta(paths["meta"])
    if meta is not None:
        console.print(f"Duración: {meta.wall_clock_seconds:.2f}s (inicio {meta.started_at.isoformat()})")
    return EXIT_OK


def execute(cmd: Command) -> int:
    """Despacha el comando y traduce errores a códigos de salida"""
    handlers = {
        "train": _execute_train,
        "sweep-tmin": _execute_sweep,
        "sweep-init": _execute_sweep,
        "sweep-batch": _execute_sweep,
        "gradcheck": _execute_gradcheck,
        "report": _execute_report,
    }
    try:
        return handlers[cmd.kind](cmd)
    except IdxParseError as e:
        logger.error(f"Error al leer archivos IDX: {e}")
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_FAILURE
    except (ValidationError, DomainError, InvalidInputError) as e:
        logger.error(f"Configuración inválida: {e}")
        print(f"❌ Configuración inválida: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        logger.error(f"Error de E/S: {e}")
        print(f"❌ Error de E/S: {e}", file=sys.stderr)
        return EXIT_FAILURE


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        cmd = parse_args(argv)
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.UsageError as e:
        e.show()
        if e.ctx is not None:
            click.echo(e.ctx.get_help(), err=True)
        return EXIT_USAGE
    except click.ClickException as e:
        e.show()
        return EXIT_FAILURE
    return execute(cmd)


if __name__ == "__main__":
    sys.exit(main())
