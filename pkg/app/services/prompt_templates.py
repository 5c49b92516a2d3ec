"""
Templates de prompt versionados por hash de conteúdo.
"""

import hashlib
from pathlib import Path
from string import Formatter
from typing import Dict, Optional, Union

from loguru import logger

from app.core.config import settings
from app.core.exceptions import ConfigError


class TemplateSet:
    """
    Conjunto de templates `.txt` de um diretório.

    O digest cobre nomes e conteúdos de todos os arquivos e entra no hash do
    manifesto e nas chaves do cache: editar um template invalida ambos.
    """

    def __init__(self, directory: Optional[Union[str, Path]] = None):
        self.directory = Path(directory or settings.TEMPLATES_DIR)
        if not self.directory.is_dir():
            raise ConfigError(f"Diretório de templates não encontrado: {self.directory}")

        self._templates: Dict[str, str] = {}
        for path in sorted(self.directory.glob("*.txt")):
            self._templates[path.stem] = path.read_text(encoding="utf-8").rstrip("\n")

        hasher = hashlib.sha256()
        for name in sorted(self._templates):
            hasher.update(name.encode("utf-8"))
            hasher.update(b"\0")
            hasher.update(self._templates[name].encode("utf-8"))
            hasher.update(b"\0")
        self.digest = hasher.hexdigest()

        logger.debug(f"{len(self._templates)} templates carregados de {self.directory} ({self.digest[:12]})")

    def __contains__(self, name: str) -> bool:
        return name in self._templates

    def names(self):
        return sorted(self._templates)

    def placeholders(self, name: str):
        """Campos `{...}` usados pelo template."""
        return {field for _, field, _, _ in Formatter().parse(self._raw(name)) if field}

    def _raw(self, name: str) -> str:
        try:
            return self._templates[name]
        except KeyError:
            raise ConfigError(f"Template inexistente: {name}")

    def render(self, name: str, **values) -> str:
        """
        Preenche o template com os valores dados.

        Raises:
            ConfigError: Template inexistente ou placeholder sem valor
        """
        template = self._raw(name)
        try:
            return template.format_map(values)
        except KeyError as exc:
            raise ConfigError(f"Template {name}: placeholder sem valor {exc}")
