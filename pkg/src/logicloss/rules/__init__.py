"""Rule files shipped with the package."""

from functools import lru_cache
from importlib import resources

from ..logic import RuleSet, parse_rule_file


def rule_text(name: str = "nli.rules") -> str:
    return resources.files(__name__).joinpath(name).read_text(encoding="utf-8")


@lru_cache(maxsize=None)
def load_nli_rules() -> RuleSet:
    return parse_rule_file(rule_text("nli.rules"))
