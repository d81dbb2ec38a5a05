"""Run configuration: key = value files mapped onto typed dataclasses."""

from dataclasses import dataclass

from .errors import ConfigError
from .forms import TARGET_KINDS

MODES = ('solve', 'adjoint', 'estimate', 'adapt', 'verify')
_WALL_NAMES = {'pressure': 1, 'mirror': 2}
_GEOMETRIES = ('auto', 'naca')


@dataclass
class RunConfig:
    """Everything one CLI invocation needs, mode included."""

    mesh_path: str = ''
    output: str = 'out'
    mode: str = 'solve'

    gamma: float = 1.4
    mach_inf: float = 0.0
    alpha_deg: float = 0.0

    target: str = 'drag'
    x_ref: float = 0.25
    y_ref: float = 0.0
    l_ref: float = 1.0
    wall_treatment: str = 'pressure'
    inconsistent_adjoint: bool = False
    p_init: int = 1

    geometry: str = 'auto'
    thickness: float = 0.12

    j_ref: float = float('nan')

    tol: float = 1e-4
    max_levels: int = 10
    p_max: int = 4
    refine_fraction: float = 0.2
    equi_exponent: float = 1.0
    sigma_max: float = 100.0
    adapt_mode: str = 'hp'
    max_dof: int = 0

    solver_max_iters: int = 100
    solver_tol: float = 1e-10

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")

    def validate(self):
        if not self.mesh_path:
            raise ConfigError("config must set mesh")
        if not self.mach_inf > 0:
            raise ConfigError("mach must be positive")
        if self.target not in TARGET_KINDS:
            raise ConfigError(f"target must be one of {TARGET_KINDS}")
        if self.wall_treatment not in _WALL_NAMES:
            raise ConfigError(
                f"wall must be one of {tuple(_WALL_NAMES)}")
        if self.geometry not in _GEOMETRIES:
            raise ConfigError(f"geometry must be one of {_GEOMETRIES}")
        if self.p_init < 1:
            raise ConfigError("p_init must be at least one")
        return self

    @property
    def wall_kind(self):
        return _WALL_NAMES[self.wall_treatment]


def _parse_bool(text):
    low = text.strip().lower()
    if low in ('true', 'yes', 'on', '1'):
        return True
    if low in ('false', 'no', 'off', '0'):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# config key -> (RunConfig attribute, caster)
_KEYS = {
    'mesh': ('mesh_path', str),
    'output': ('output', str),
    'gamma': ('gamma', float),
    'mach': ('mach_inf', float),
    'alpha': ('alpha_deg', float),
    'target': ('target', str),
    'x_ref': ('x_ref', float),
    'y_ref': ('y_ref', float),
    'l_ref': ('l_ref', float),
    'wall': ('wall_treatment', str),
    'inconsistent_adjoint': ('inconsistent_adjoint', _parse_bool),
    'p_init': ('p_init', int),
    'geometry': ('geometry', str),
    'thickness': ('thickness', float),
    'j_ref': ('j_ref', float),
    'tol': ('tol', float),
    'max_levels': ('max_levels', int),
    'p_max': ('p_max', int),
    'refine_fraction': ('refine_fraction', float),
    'equi_exponent': ('equi_exponent', float),
    'sigma_max': ('sigma_max', float),
    'adapt': ('adapt_mode', str),
    'max_dof': ('max_dof', int),
    'solver_max_iters': ('solver_max_iters', int),
    'solver_tol': ('solver_tol', float),
}


def parse_config(path, mode='solve'):
    """Read a key = value file; unknown keys and bad values name their line."""
    config = RunConfig(mode=mode)
    with open(path) as handle:
        for ln, raw in enumerate(handle, start=1):
            line = raw.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                raise ConfigError(
                    f"{path}:{ln}: expected key = value, got {raw.strip()!r}")
            key, value = (part.strip() for part in line.split('=', 1))
            if key not in _KEYS:
                raise ConfigError(f"{path}:{ln}: unknown key '{key}'")
            attr, cast = _KEYS[key]
            try:
                setattr(config, attr, cast(value))
            except ValueError as err:
                raise ConfigError(
                    f"{path}:{ln}: bad value for '{key}': {err}") from err
    return config.validate()
