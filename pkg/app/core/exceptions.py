"""
Hierarquia de exceções do benchmark.
"""

from typing import Optional


class BenchmarkError(Exception):
    """Erro base de todo o harness."""


class ConfigError(BenchmarkError):
    """Configuração de experimento inválida."""


# ============================================================================
# INGESTÃO
# ============================================================================

class SchemaError(BenchmarkError):
    """Registro do arquivo de coorte não segue o schema de intercâmbio."""

    def __init__(self, line: int, reason: str):
        self.line = line
        self.reason = reason
        super().__init__(f"linha {line}: {reason}")


class DuplicateEncounter(BenchmarkError):
    """encounter_id repetido dentro da mesma coorte."""

    def __init__(self, encounter_id: str, line: Optional[int] = None):
        self.encounter_id = encounter_id
        self.line = line
        where = f" (linha {line})" if line is not None else ""
        super().__init__(f"Encounter duplicado: {encounter_id}{where}")


class MissingPS(BenchmarkError):
    """Encounter sem patient summary."""

    def __init__(self, encounter_id: str, line: Optional[int] = None):
        self.encounter_id = encounter_id
        self.line = line
        where = f" (linha {line})" if line is not None else ""
        super().__init__(f"Encounter sem PS: {encounter_id}{where}")


class EmptyCohort(BenchmarkError):
    """Coorte vazia onde se exige ao menos um encounter."""


# ============================================================================
# SERIALIZAÇÃO
# ============================================================================

class MissingBaseModality(BenchmarkError):
    """PS foi excluído do conjunto de modalidades."""


# ============================================================================
# GATEWAY
# ============================================================================

class BackendError(BenchmarkError):
    """Falha ao falar com o backend de chat-completion."""


class TransientBackendError(BackendError):
    """Falha recuperável (429, 5xx, timeout); o gateway tenta de novo."""

    def __init__(self, status: Optional[int], detail: str = ""):
        self.status = status
        super().__init__(f"falha transitória (status={status}) {detail}".strip())


class BackendUnavailable(BackendError):
    """Tentativas esgotadas."""

    def __init__(self, attempts: int, last_error: Optional[Exception] = None):
        self.attempts = attempts
        self.last_error = last_error
        super().__init__(f"Backend indisponível após {attempts} tentativas: {last_error}")


class MalformedResponse(BackendError):
    """Corpo da resposta não decodificável."""


class AuthError(BackendError):
    """Credencial ausente ou rejeitada."""


class CacheCorrupt(BenchmarkError):
    """Entrada de cache falhou na verificação de integridade."""

    def __init__(self, key: str, reason: str = ""):
        self.key = key
        super().__init__(f"Entrada de cache corrompida {key}: {reason}")


# ============================================================================
# PROTOCOLOS
# ============================================================================

class ExemplarUnavailable(BenchmarkError):
    """Split de treino sem exemplo positivo ou negativo para few-shot."""


class AllAgentsFailed(BenchmarkError):
    """Todos os agentes retornaram parse_status=error."""


class DegenerateWeights(BenchmarkError):
    """Soma dos pesos dos agentes participantes é zero."""


class MalformedMetaDecision(BenchmarkError):
    """Resposta do meta-agente não contém DECISION nem CONSULT."""


class UnknownProtocol(BenchmarkError):
    """Protocolo plug-in não registrado."""

    def __init__(self, name: str):
        self.name = name
        super().__init__(f"Protocolo não registrado: {name}")


# ============================================================================
# MÉTRICAS
# ============================================================================

class DegenerateClasses(BenchmarkError):
    """Uma das classes está ausente das amostras."""


class EmptyInput(BenchmarkError):
    """Nenhuma amostra para avaliar."""


class TooManyDegenerateResamples(BenchmarkError):
    """Bootstrap não conseguiu reamostras válidas suficientes."""
