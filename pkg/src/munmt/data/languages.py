"""Language family / branch table used to group branch teachers."""

from __future__ import annotations

from dataclasses import dataclass, field

# (family, branch) for the thirteen languages of the original experiments
DEFAULT_BRANCHES: dict[str, tuple[str, str]] = {
    "cs": ("Indo-European", "Slavic"),
    "de": ("Indo-European", "Germanic"),
    "en": ("Indo-European", "Germanic"),
    "es": ("Indo-European", "Romance"),
    "fr": ("Indo-European", "Romance"),
    "it": ("Indo-European", "Romance"),
    "ro": ("Indo-European", "Romance"),
    "lt": ("Indo-European", "Baltic"),
    "lv": ("Indo-European", "Baltic"),
    "et": ("Uralic", "Finno-Ugric"),
    "fi": ("Uralic", "Finno-Ugric"),
    "hu": ("Uralic", "Finno-Ugric"),
    "tr": ("Turkic", "Turkic"),
}


@dataclass
class LanguageBranchMap:
    table: dict[str, tuple[str, str]] = field(default_factory=lambda: dict(DEFAULT_BRANCHES))

    @classmethod
    def from_branches(cls, branches: dict[str, str], family: str = "synthetic") -> "LanguageBranchMap":
        return cls({lang: (family, b) for lang, b in branches.items()})

    @property
    def languages(self) -> list[str]:
        return list(self.table)

    def branch(self, lang: str) -> str:
        try:
            return self.table[lang][1]
        except KeyError:
            raise KeyError(f"language {lang!r} has no branch assignment") from None

    def family(self, lang: str) -> str:
        return self.table[lang][0]

    def branches(self) -> dict[str, list[str]]:
        """Branch -> member languages, in table order."""
        out: dict[str, list[str]] = {}
        for lang, (_, b) in self.table.items():
            out.setdefault(b, []).append(lang)
        return out

    def families(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for lang, (f, _) in self.table.items():
            out.setdefault(f, []).append(lang)
        return out

    def restrict(self, languages) -> "LanguageBranchMap":
        missing = [lang for lang in languages if lang not in self.table]
        if missing:
            raise KeyError(f"no branch assignment for {missing}")
        return LanguageBranchMap({lang: self.table[lang] for lang in languages})
