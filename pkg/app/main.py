"""
Aplicação principal FastAPI: backend mock de chat-completion e endpoint de métricas.
"""

from contextlib import asynccontextmanager
from typing import Optional

from fastapi import FastAPI

from app import __version__
from app.api.routers import metrics, mock_llm
from app.core.config import settings
from app.models.llm import MockScript
from app.services.mock_backend import MockChatTransport, load_mock_script

DEFAULT_SCRIPT = MockScript(default="PROBABILITY: 0.5")


@asynccontextmanager
async def lifespan(app: FastAPI):
    """Gerenciamento do ciclo de vida da aplicação."""
    script = app.state.mock_transport.script
    print(f"🚀 Backend mock pronto ({len(script.rules)} regras)")
    yield
    print(f"🛑 Encerrando backend mock após {app.state.mock_transport.calls} chamadas")


def create_app(script: Optional[MockScript] = None) -> FastAPI:
    """
    Cria a aplicação servindo o roteiro mock dado.

    Sem roteiro explícito, usa MOCK_SCRIPT_PATH das configurações ou uma
    resposta padrão fixa.
    """
    if script is None:
        script = load_mock_script(settings.MOCK_SCRIPT_PATH) if settings.MOCK_SCRIPT_PATH else DEFAULT_SCRIPT

    application = FastAPI(
        title=settings.APP_NAME,
        description="Backend mock compatível com chat-completions e avaliação de métricas",
        version=__version__,
        lifespan=lifespan,
    )
    application.state.mock_transport = MockChatTransport(script)

    application.include_router(mock_llm.router)
    application.include_router(metrics.router, prefix=settings.API_V1_PREFIX)

    @application.get("/")
    async def root():
        """Endpoint raiz."""
        return {
            "message": "ICU Agent Benchmark API",
            "version": __version__,
            "docs": "/docs",
            "health": "/health",
        }

    @application.get("/health")
    async def health_check():
        """Health check endpoint."""
        return {
            "status": "healthy",
            "environment": settings.ENV,
            "mock_calls": application.state.mock_transport.calls,
        }

    return application


app = create_app()


if __name__ == "__main__":
    import uvicorn
    uvicorn.run(
        "app.main:app",
        host=settings.API_HOST,
        port=settings.API_PORT,
        reload=settings.DEBUG,
    )
