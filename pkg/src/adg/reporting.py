"""Artifact emission: VTK fields, convergence tables, and figures.

All numbers are written with repr-precision formatting and iteration
orders fixed by element index, so repeated runs with identical inputs
produce byte-identical files.
"""

import os

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np

from . import euler

CSV_HEADER = 'level,dof,J,Jtilde,eta_I,eta_II,effectivity'


def _fmt(x):
    return f'{float(x):.17g}'


def cell_means(sol):
    """Exact per-element mean states from the constant-mode coefficients."""
    mesh = sol.space.mesh
    out = np.zeros((mesh.n_elements, 4))
    for cls in sol.space.classes:
        blocks = sol.coeffs[cls.dof]
        out[cls.elems] = blocks[:, :, 0] * cls.basis[:, 0, 0][:, None]
    return out


def flow_cell_fields(sol, gas):
    """Ordered name -> per-element array dict for the flow state."""
    mean = cell_means(sol)
    rho = mean[:, 0]
    vel = euler.velocity(mean)
    speed = np.hypot(vel[:, 0], vel[:, 1])
    pressure = euler.pressure(mean, gas)
    sound = np.sqrt(gas.gamma * pressure / rho)
    return {
        'rho': rho,
        'speed': speed,
        'pressure': pressure,
        'mach': speed / sound,
    }


def write_vtk(path, mesh, fields=()):
    """Legacy ASCII VTK triangulation with named per-cell scalar fields.

    fields is a sequence of (name, values, kind) with kind 'int' or
    'double'; the degree field is always written first.
    """
    lines = [
        '# vtk DataFile Version 3.0',
        'adg fields',
        'ASCII',
        'DATASET UNSTRUCTURED_GRID',
        f'POINTS {len(mesh.vertices)} double',
    ]
    for x, y in mesh.vertices:
        lines.append(f'{_fmt(x)} {_fmt(y)} 0')
    nel = mesh.n_elements
    lines.append(f'CELLS {nel} {4 * nel}')
    for i, j, k in mesh.triangles:
        lines.append(f'3 {i} {j} {k}')
    lines.append(f'CELL_TYPES {nel}')
    lines.extend(['5'] * nel)
    lines.append(f'CELL_DATA {nel}')
    all_fields = [('degree', mesh.degrees, 'int')] + list(fields)
    for name, values, kind in all_fields:
        lines.append(f'SCALARS {name} {kind} 1')
        lines.append('LOOKUP_TABLE default')
        if kind == 'int':
            lines.extend(str(int(v)) for v in values)
        else:
            lines.extend(_fmt(v) for v in values)
    with open(path, 'w') as handle:
        handle.write('\n'.join(lines) + '\n')


def solution_fields(sol, gas, adjoint=None, report=None):
    """Assemble the standard cell-data list for one level's VTK file."""
    fields = [(name, vals, 'double')
              for name, vals in flow_cell_fields(sol, gas).items()]
    if adjoint is not None:
        zmean = cell_means(adjoint.z)
        for c in range(4):
            fields.append((f'z{c + 1}', zmean[:, c], 'double'))
    if report is not None:
        fields.append(('eta_IK', report.eta_IK, 'double'))
        fields.append(('eta_IIK', report.eta_IIK, 'double'))
    return fields


def convergence_row(level, dof, report):
    eff = report.effectivity
    return ','.join([str(int(level)), str(int(dof)), _fmt(report.j_value),
                     _fmt(report.jtilde_value), _fmt(report.eta_I),
                     _fmt(report.eta_II), _fmt(eff)])


def write_convergence(path, rows):
    with open(path, 'w') as handle:
        handle.write(CSV_HEADER + '\n')
        for row in rows:
            handle.write(row + '\n')


def mesh_figure(path, mesh, title='mesh'):
    fig, ax = plt.subplots(figsize=(7, 6))
    v, t = mesh.vertices, mesh.triangles
    pc = ax.tripcolor(v[:, 0], v[:, 1], t, facecolors=mesh.degrees,
                      cmap='viridis', edgecolors='k', linewidth=0.2,
                      vmin=1, vmax=max(4, int(mesh.degrees.max())))
    fig.colorbar(pc, ax=ax, label='degree')
    ax.set_aspect('equal')
    ax.set_title(title)
    fig.savefig(path, dpi=150, bbox_inches='tight')
    plt.close(fig)


def convergence_figure(path, levels_dof, eta_i, eta_ii, j_err=None):
    fig, ax = plt.subplots(figsize=(6, 4.5))
    ax.loglog(levels_dof, np.abs(eta_i), 'o-', label='|eta_I|')
    ax.loglog(levels_dof, eta_ii, 's--', label='eta_II')
    if j_err is not None and np.all(np.isfinite(j_err)):
        ax.loglog(levels_dof, np.maximum(np.abs(j_err), 1e-300), 'd:',
                  label='|J - J_ref|')
    ax.set_xlabel('degrees of freedom')
    ax.set_ylabel('estimate')
    ax.grid(True, which='both', alpha=0.3)
    ax.legend()
    fig.savefig(path, dpi=150, bbox_inches='tight')
    plt.close(fig)


def residual_figure(path, history):
    fig, ax = plt.subplots(figsize=(6, 4.5))
    res = [row[1] for row in history.rows]
    ax.semilogy(range(len(res)), res, 'o-')
    ax.set_xlabel('nonlinear step')
    ax.set_ylabel('residual norm')
    ax.grid(True, which='both', alpha=0.3)
    fig.savefig(path, dpi=150, bbox_inches='tight')
    plt.close(fig)


def level_dir(output, level):
    path = os.path.join(output, f'level_{level}')
    os.makedirs(path, exist_ok=True)
    return path
