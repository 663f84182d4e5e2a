"""Legacy configuration keys.

Run-config documents outlive the code that wrote them. Keys renamed between versions are remapped on load and
the user is warned, at most a fixed number of times per key.

"""

import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field
from functools import partial
from typing import Any, Callable, Dict, Generator, List, Mapping, Optional, Type, Union


#: Default template warning message for renamed or dropped keys
TEMPLATE_WARNING_KEYS = (
    "The `%(section)s` config uses deprecated keys: %(key_map)s."
    " They were deprecated since v%(deprecated_in)s and will be removed in v%(remove_in)s."
)
#: Template for mapping from old to new keys
TEMPLATE_KEY_MAPPING = "`%(old_key)s` -> `%(new_key)s`"
#: Template for keys which are dropped without replacement
TEMPLATE_KEY_DROPPED = "`%(old_key)s` -> (dropped)"

deprecation_warning = partial(warnings.warn, category=FutureWarning)


@dataclass
class LegacyKeys:
    """Renamed keys of one config section.

    Args:
        section: name of the config section, used in the message
        mapping: old key to new key; ``None`` drops the old key
        deprecated_in: version which renamed the keys
        remove_in: version which stops accepting the old keys
        num_warns: warnings per old key in the process lifetime, negative means no limit
        stream: callable taking the message; ``None`` silences the warning
        template_mgs: python formatted message with ``section``, ``key_map``, ``deprecated_in``, ``remove_in``

    """

    section: str
    mapping: Dict[str, Optional[str]]
    deprecated_in: str = ""
    remove_in: str = ""
    num_warns: int = 1
    stream: Optional[Callable] = deprecation_warning
    template_mgs: str = TEMPLATE_WARNING_KEYS
    _warned: Dict[str, int] = field(default_factory=dict, repr=False)

    def reset(self) -> None:
        """Forget how many times each key was warned about."""
        self._warned.clear()


def _key_map_repr(keys: List[str], mapping: Mapping[str, Optional[str]]) -> str:
    parts = []
    for key in keys:
        new_key = mapping[key]
        template = TEMPLATE_KEY_MAPPING if new_key else TEMPLATE_KEY_DROPPED
        parts.append(template % {"old_key": key, "new_key": new_key})
    return ", ".join(parts)


def remap_legacy_keys(doc: Mapping[str, Any], legacy: LegacyKeys) -> Dict[str, Any]:
    """Return a copy of ``doc`` with legacy keys renamed or dropped.

    When both the old and the new key are present, the new one wins and the old value is discarded.

    Args:
        doc: one config section as parsed from JSON
        legacy: renames registered for this section

    Returns:
        new dictionary using only current key names

    Example:
        >>> keys = LegacyKeys("backbone", {"width": "cross_width"}, "0.2", "0.4", stream=None)
        >>> remap_legacy_keys({"width": 64, "family": "masknet"}, keys)
        {'cross_width': 64, 'family': 'masknet'}

    """
    used = [key for key in doc if key in legacy.mapping]
    if not used:
        return dict(doc)
    nb_warned = min(legacy._warned.get(key, 0) for key in used)
    if legacy.stream and (legacy.num_warns < 0 or nb_warned < legacy.num_warns):
        msg_args = {
            "section": legacy.section,
            "key_map": _key_map_repr(used, legacy.mapping),
            "deprecated_in": legacy.deprecated_in,
            "remove_in": legacy.remove_in,
        }
        legacy.stream(legacy.template_mgs % msg_args)
        for key in used:
            legacy._warned[key] = legacy._warned.get(key, 0) + 1

    remapped: Dict[str, Any] = {}
    for key, val in doc.items():
        if key not in legacy.mapping:
            remapped[key] = val
            continue
        new_key = legacy.mapping[key]
        # the current key name is preferred if given as well
        if new_key and new_key not in doc:
            remapped[new_key] = val
    return remapped


#: Registered renames per config section
LEGACY_BACKBONE_KEYS = LegacyKeys(
    "backbone",
    {
        "width": "cross_width",
        "mask_blocks": "parallel_blocks",
        "serial_blocks": "sequential_blocks",
        "heads": "n_heads",
    },
    deprecated_in="0.2",
    remove_in="0.4",
)
LEGACY_SCHEDULE_KEYS = LegacyKeys(
    "schedule", {"warmup": "warmup_fraction", "lr": "lr_peak"}, deprecated_in="0.2", remove_in="0.4"
)
LEGACY_RUN_KEYS = LegacyKeys(
    "run",
    {"batch": "batch_size", "days": "data_days", "legacy_seed_offset": None},
    deprecated_in="0.2",
    remove_in="0.4",
)


def _warns_repr(warns: List[warnings.WarningMessage]) -> List[Union[Warning, str]]:
    return [w.message for w in warns]


@contextmanager
def no_warning_call(warning_type: Optional[Type[Warning]] = None, match: Optional[str] = None) -> Generator:
    """Assert that the wrapped block raises no warning of ``warning_type`` containing ``match``.

    Raises:
        AssertionError: if such a warning was raised

    """
    with warnings.catch_warnings(record=True) as called:
        warnings.simplefilter("always")
        yield
    warns = [w for w in called if warning_type is None or issubclass(w.category, warning_type)]
    if match:
        warns = [w for w in warns if match in str(w.message)]
    if not warns:
        return
    kind = f"`{warning_type.__name__}` warnings" if warning_type else "all warnings"
    with_match = f' with "{match}"' if match else ""
    raise AssertionError(f"While catching {kind}{with_match}, these were found: {_warns_repr(warns)}")
