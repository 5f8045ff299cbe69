"""Versioned prompt templates.

Templates live as text assets under `prompts/<name>/<version>.txt` with named
placeholders; every run artifact records the hash of the template it used so
results stay attributable to exact wording.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from importlib import resources


class TemplateError(KeyError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    version: str
    text: str

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()

    def render(self, **values: object) -> str:
        """Substitute {PLACEHOLDER} occurrences; unknown placeholders are left
        alone so a template typo shows up in output rather than crashing."""
        out = self.text
        for key, value in values.items():
            out = out.replace("{" + key + "}", str(value))
        return out


def load_template(name: str, version: str = "v1") -> PromptTemplate:
    root = resources.files(__package__) / "prompts" / name / f"{version}.txt"
    try:
        text = root.read_text(encoding="utf-8")
    except (FileNotFoundError, NotADirectoryError) as exc:
        raise TemplateError(f"no prompt template {name}/{version}") from exc
    return PromptTemplate(name=name, version=version, text=text)
