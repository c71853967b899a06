"""Dense brute-force reference computations used by the tests."""
import numpy as np

from srcid.services.assembly import CoefficientSet, SpaceTimeField
from srcid.services.mesh import Mesh

# exact for quadratics on a triangle (edge midpoints, equal weights)
_TRI_POINTS = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])
# 2-point Gauss on an edge, barycentric weight of the first endpoint
_EDGE_S = (0.5 + 0.5 / np.sqrt(3.0), 0.5 - 0.5 / np.sqrt(3.0))


def basis(p: np.ndarray):
    """Coefficients (a, b, c) of phi_i = a x + b y + c on the triangle with vertices p."""
    V = np.column_stack([p, np.ones(3)])
    return np.linalg.inv(V)  # column i holds phi_i


def dense_mass(mesh: Mesh) -> np.ndarray:
    out = np.zeros((mesh.n_nodes, mesh.n_nodes))
    for tri in mesh.triangles:
        p = mesh.nodes[tri]
        area = 0.5 * abs(np.linalg.det(np.column_stack([p[1] - p[0], p[2] - p[0]])))
        for lam in _TRI_POINTS:
            out[np.ix_(tri, tri)] += area / 3.0 * np.outer(lam, lam)
    return out


def dense_edge_mass(mesh: Mesh, edges: np.ndarray, weight=lambda x, y: 1.0) -> np.ndarray:
    out = np.zeros((mesh.n_nodes, mesh.n_nodes))
    for e in edges:
        a, b = mesh.nodes[e[0]], mesh.nodes[e[1]]
        length = np.linalg.norm(b - a)
        mid = 0.5 * (a + b)
        w = weight(mid[0], mid[1])
        for s in _EDGE_S:
            phi = np.array([s, 1.0 - s])
            out[np.ix_(e, e)] += 0.5 * length * w * np.outer(phi, phi)
    return out


def dense_operator(mesh: Mesh, coeffs: CoefficientSet, t: float) -> np.ndarray:
    out = np.zeros((mesh.n_nodes, mesh.n_nodes))
    for tri in mesh.triangles:
        p = mesh.nodes[tri]
        C = basis(p)
        grads = C[:2].T  # (3, 2)
        area = 0.5 * abs(np.linalg.det(np.column_stack([p[1] - p[0], p[2] - p[0]])))
        c = p.mean(axis=0)
        A = coeffs.A(c[0], c[1], t)
        b = float(coeffs.b(c[0], c[1], t))
        out[np.ix_(tri, tri)] += area * grads @ A @ grads.T
        for lam in _TRI_POINTS:
            out[np.ix_(tri, tri)] += b * area / 3.0 * np.outer(lam, lam)
    out += dense_edge_mass(mesh, mesh.boundary_edges, lambda x, y: float(coeffs.sigma(x, y, t)))
    return out


def dense_boundary_load(mesh: Mesh, g: float) -> np.ndarray:
    out = np.zeros(mesh.n_nodes)
    for e in mesh.boundary_edges:
        length = np.linalg.norm(mesh.nodes[e[1]] - mesh.nodes[e[0]])
        out[e] += 0.5 * g * length
    return out


def dense_state_map(problem):
    """
    Affine state map on the flattened slabs: steps(U(f)) = U0 + S f, plus the block
    boundary and mass matrices of the space-time pairings.
    """
    disc = problem.disc
    M, N = disc.grid.M, disc.n_nodes
    U0 = disc.forward(SpaceTimeField.zeros(disc.grid, N)).steps.ravel()
    S = np.zeros((M * N, M * N))
    for j in range(M * N):
        e = np.zeros(M * N)
        e[j] = 1.0
        S[:, j] = disc.sensitivity(SpaceTimeField(e.reshape(M, N), disc.grid)).steps.ravel()
    tau = disc.tau
    Bbig = np.kron(np.eye(M), tau * disc.boundary_mass.toarray())
    Mbig = np.kron(np.eye(M), tau * disc.mass.toarray())
    Z = problem.observation.full(N).ravel()
    return U0, S, Bbig, Mbig, Z


def dense_minimizer(problem) -> np.ndarray:
    """Solution of the normal equations (S^T B S + rho M) f = S^T B (Z - U0) + rho M f*."""
    U0, S, Bbig, Mbig, Z = dense_state_map(problem)
    rho = problem.rho
    fstar = problem.f_star.values.ravel()
    H = S.T @ Bbig @ S + rho * Mbig
    rhs = S.T @ Bbig @ (Z - U0) + rho * Mbig @ fstar
    return np.linalg.solve(H, rhs)
