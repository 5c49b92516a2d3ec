"""
Configurações da aplicação usando Pydantic Settings.
"""

from pathlib import Path
from typing import List

from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    """Configurações da aplicação."""

    # Application
    APP_NAME: str = "ICU Agent Benchmark"
    ENV: str = "development"
    DEBUG: bool = True
    LOG_LEVEL: str = "INFO"

    # API (servidor mock e endpoint de métricas)
    API_HOST: str = "0.0.0.0"
    API_PORT: int = 8000
    API_V1_PREFIX: str = "/api/v1"

    # Backend de chat-completion
    BACKEND_URL: str = "http://localhost:8000/v1/chat/completions"
    BACKEND_AUTH_ENV: str = "LLM_API_KEY"
    MODEL_ID: str = "qwen2.5-vl-7b-instruct"
    MAX_CONCURRENT: int = 4
    REQUESTS_PER_MINUTE: int = 600
    MAX_RETRIES: int = 5
    BACKOFF_BASE_MS: int = 500
    REQUEST_TIMEOUT_S: float = 120.0
    MAX_TOKENS: int = 768

    # Execução
    SEED: int = 42
    WORKERS: int = 4
    CACHE_DIR: str = ".cache/completions"
    OUTPUT_DIR: str = "runs"
    TEMPLATES_DIR: str = str(Path(__file__).resolve().parent.parent / "templates")

    # Protocolos
    DECISION_THRESHOLD: float = 0.5
    OBSERVATION_WINDOW_HOURS: int = 48
    COT_SC_PATHS: int = 3
    COT_SC_TEMPERATURE: float = 0.7
    DEBATE_MAX_ROUNDS: int = 3
    DEBATE_PEER_CHAR_LIMIT: int = 600
    DEBATE_MULTIMODAL_AGENTS: int = 4
    TRAJ_CHUNK_STEPS: int = 100

    # Servidor mock (serve-mock / app.main)
    MOCK_SCRIPT_PATH: str = ""

    # Métricas
    ECE_BINS: int = 10
    BOOTSTRAP_N: int = 1000
    BOOTSTRAP_LEVEL: float = 0.95

    # Divisão treino/validação/teste
    SPLIT_RATIOS: str = "0.70,0.10,0.20"

    @property
    def split_ratios(self) -> List[float]:
        """Retorna as proporções de divisão como lista de floats."""
        return [float(part.strip()) for part in self.SPLIT_RATIOS.split(",")]

    class Config:
        env_file = ".env"
        case_sensitive = True


settings = Settings()
