from pydantic_settings import BaseSettings
from functools import lru_cache


class Settings(BaseSettings):
    # Configuración de la aplicación
    app_name: str = "RCT Training Engine"
    debug: bool = False
    version: str = "1.0.0"
    log_level: str = "INFO"

    # Cuantización
    scale_floor: float = 2.0 ** -24
    activation_bits: int = 8
    gradient_bits: int = 32

    # Política de bitwidth: deriva de cobertura (fracción del rango) que fuerza refresco de (S, Z)
    refresh_drift_fraction: float = 0.1

    # Chequeo de gradientes
    gradcheck_tolerance: float = 1e-3
    gradcheck_step: float = 1e-4

    # Barridos
    sweep_seeds: int = 5
    sweep_jobs: int = 1

    # Nombres de artefactos
    history_file: str = "bitwidth_history.csv"
    report_file: str = "report.json"
    sweep_file: str = "sweep.csv"
    sweep_runs_file: str = "sweep_runs.csv"
    final_bitwidth_file: str = "bitwidth_final.csv"
    run_meta_file: str = "run_meta.json"

    @property
    def effective_log_level(self) -> str:
        """Nivel de logging considerando el modo debug"""
        return "DEBUG" if self.debug else self.log_level.upper()

    class Config:
        env_prefix = "RCT_"
        env_file = ".env"
        env_file_encoding = "utf-8"
        case_sensitive = False
        # Permitir variables de entorno que sobrescriban valores por defecto
        extra = "ignore"


@lru_cache()
def get_settings():
    return Settings()


# Instancia global de configuración
settings = get_settings()


# Para debug - mostrar configuración
def print_config():
    """Imprimir configuración actual (para debug)"""
    print("\n🔧 Configuración actual:")
    print(f"  App: {settings.app_name} v{settings.version}")
    print(f"  Debug: {settings.debug} (log level {settings.effective_log_level})")
    print(f"  Scale floor: {settings.scale_floor:.3e}")
    print(f"  Activaciones: {settings.activation_bits} bits, gradientes: {settings.gradient_bits} bits")
    print(f"  Refresco por deriva: {settings.refresh_drift_fraction:.0%} del rango")
    print(f"  Gradcheck: tolerancia {settings.gradcheck_tolerance}, h = {settings.gradcheck_step}")
    print(f"  Barridos: {settings.sweep_seeds} semillas, {settings.sweep_jobs} jobs")
    print()


if __name__ == "__main__":
    # Test de configuración
    print_config()
