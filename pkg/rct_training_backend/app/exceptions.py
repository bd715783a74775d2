class RCTError(Exception):
    """Base de todos los errores del motor de entrenamiento"""
    pass


class InvalidInputError(RCTError, ValueError):
    """Entrada numérica vacía o con valores no finitos"""
    pass


class DomainError(RCTError, ValueError):
    """Argumento fuera de su dominio (bitwidth, formas, ε, especificación del dataset)"""
    pass


class UsageError(RCTError, RuntimeError):
    """Uso de la API fuera de orden (caché vieja, historial desordenado)"""
    pass


class IdxParseError(RCTError, ValueError):
    """Archivo IDX ilegible; guarda el offset en bytes del fallo"""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset
