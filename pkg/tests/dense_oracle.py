"""Dense full-matrix EKF used as an independent oracle in tests.

Assembles the whole team into stacked vectors/matrices and runs the update
with plain dense arithmetic, so any indexing or bookkeeping bug in the
blockwise implementations shows up as a mismatch.
"""

import numpy as np

from splitcl import model


def stack(belief):
    ids = belief.robot_ids
    x = np.concatenate([belief.means[i] for i in ids])
    p = belief.joint_matrix()
    return x, p


def dense_propagate(x, p, controls, noises, dt):
    """controls/noises are lists aligned with the stacked robot order."""
    n = len(controls)
    x_out = np.zeros_like(x)
    f_joint = np.zeros((3 * n, 3 * n))
    gqg = np.zeros((3 * n, 3 * n))
    for r in range(n):
        sl = slice(3 * r, 3 * r + 3)
        f, g = model.motion_jacobians(x[sl], controls[r], dt)
        x_out[sl] = model.propagate_pose(x[sl], controls[r], dt)
        f_joint[sl, sl] = f
        gqg[sl, sl] = g @ noises[r] @ g.T
    return x_out, f_joint @ p @ f_joint.T + gqg


def dense_measurement_row(x, n, obs_idx, lm_idx):
    """Stacked measurement Jacobian, predicted value and block Jacobians."""
    h_row = np.zeros((2, 3 * n))
    a = slice(3 * obs_idx, 3 * obs_idx + 3)
    if lm_idx is None:
        h_obs = model.absolute_jacobian()
        h_row[:, a] = h_obs
        predicted = model.absolute_position(x[a])
    else:
        b = slice(3 * lm_idx, 3 * lm_idx + 3)
        h_obs, h_lm = model.relative_jacobians(x[a], x[b])
        h_row[:, a] = h_obs
        h_row[:, b] = h_lm
        predicted = model.relative_position(x[a], x[b])
    return h_row, predicted


def dense_update(x, p, z, noise_cov, obs_idx, lm_idx, missed_idx=()):
    """Full-matrix update; ``missed_idx`` robots keep state and own blocks.

    The gain is computed for every robot; missed robots' rows are zeroed for
    the state update, and afterwards every block with both robots missed is
    restored from the prior.
    """
    n = len(x) // 3
    h_row, predicted = dense_measurement_row(x, n, obs_idx, lm_idx)
    residual = z - predicted
    s = noise_cov + h_row @ p @ h_row.T
    k = p @ h_row.T @ np.linalg.inv(s)
    k_masked = k.copy()
    for r in missed_idx:
        k_masked[3 * r:3 * r + 3, :] = 0.0
    x_out = x + k_masked @ residual
    p_out = p - k @ s @ k.T
    for ri in missed_idx:
        for rj in missed_idx:
            p_out[3 * ri:3 * ri + 3, 3 * rj:3 * rj + 3] = p[
                3 * ri:3 * ri + 3, 3 * rj:3 * rj + 3
            ]
    return x_out, p_out, s, k


def random_belief(rng, n_robots, corr_scale=0.1):
    """A random well-formed joint belief (SPD stacked covariance)."""
    from splitcl.joint_ekf import JointBelief

    ids = range(1, n_robots + 1)
    means = {i: rng.uniform(-3, 3, 3) for i in ids}
    root = rng.standard_normal((3 * n_robots, 3 * n_robots)) * corr_scale
    joint = root @ root.T + np.eye(3 * n_robots) * 0.05
    belief = JointBelief.initialize(means, {i: np.eye(3) for i in ids})
    for ai, i in enumerate(ids):
        belief.covs[i] = joint[3 * ai:3 * ai + 3, 3 * ai:3 * ai + 3].copy()
        for aj, j in enumerate(ids):
            if i < j:
                belief.cross[(i, j)] = joint[3 * ai:3 * ai + 3, 3 * aj:3 * aj + 3].copy()
    return belief
