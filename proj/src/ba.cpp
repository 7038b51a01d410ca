#include "esfm/ba.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <vector>

namespace esfm {

namespace {

Quaternion quat_multiply(const Quaternion& a, const Quaternion& b) {
  return {a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
          a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
          a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
          a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w};
}

Quaternion quat_exp(const Eigen::Vector3d& theta) {
  const double angle = theta.norm();
  double scale;
  if (angle < 1e-8) {
    scale = 0.5 - angle * angle / 48.0;
  } else {
    scale = std::sin(angle / 2.0) / angle;
  }
  return {std::cos(angle / 2.0), scale * theta.x(), scale * theta.y(), scale * theta.z()};
}

struct State {
  CameraMode mode;
  std::vector<Quaternion> q;                              // calibrated
  std::vector<Eigen::Vector3d> tr;                        // calibrated
  std::vector<Eigen::Matrix<double, 3, 4>> P;             // projective
  Eigen::Matrix3Xd X;

  Eigen::Matrix<double, 3, 4> camera_matrix(int i) const {
    if (mode == CameraMode::Calibrated) {
      Eigen::Matrix<double, 3, 4> M;
      M.leftCols<3>() = quat_to_rotation(q[i]);
      M.col(3) = tr[i];
      return M;
    }
    return P[i];
  }
};

struct Residual {
  int cam, pt;
  Eigen::Vector2d obs;
};

double robust_cost(const State& s, const std::vector<Residual>& residuals, double delta) {
  double cost = 0.0;
  std::vector<Eigen::Matrix<double, 3, 4>> M(s.mode == CameraMode::Calibrated ? s.q.size()
                                                                              : s.P.size());
  for (size_t i = 0; i < M.size(); ++i) M[i] = s.camera_matrix(static_cast<int>(i));
  for (const Residual& r : residuals) {
    const Eigen::Vector4d Xh(s.X(0, r.pt), s.X(1, r.pt), s.X(2, r.pt), 1.0);
    const Eigen::Vector3d u = M[r.cam] * Xh;
    if (std::abs(u.z()) < 1e-15) return std::numeric_limits<double>::infinity();
    const Eigen::Vector2d e = r.obs - Eigen::Vector2d(u.x() / u.z(), u.y() / u.z());
    cost += huber_rho(e.norm(), delta).first;
  }
  return cost;
}

}  // namespace

std::pair<double, double> huber_rho(double r, double delta) {
  if (r <= delta) return {0.5 * r * r, r};
  return {delta * (r - 0.5 * delta), delta};
}

BAResult run_bundle_adjustment(const CameraSet& cams, const PointCloud& pts,
                               const MeasurementTensor& t, const BAConfig& cfg) {
  const int m = t.cameras(), n = t.tracks();
  if (cams.size() != m || pts.size() != n)
    throw Error(ErrorCode::ShapeMismatch, "camera/point counts do not match the tensor");

  const int cam_dof = cams.mode == CameraMode::Calibrated ? 6 : 12;

  State state;
  state.mode = cams.mode;
  state.X = pts.points;
  if (cams.mode == CameraMode::Calibrated) {
    state.q.resize(m);
    state.tr.resize(m);
    for (int i = 0; i < m; ++i) {
      state.q[i] = cams.poses[i].rotation.normalized();
      state.tr[i] = cams.poses[i].translation;
    }
  } else {
    state.P.resize(m);
    for (int i = 0; i < m; ++i) state.P[i] = cams.cameras[i].P;
  }

  BAResult result;

  // Measurements whose initial depth is non-positive are left out; tracks
  // with < 2 usable views are frozen entirely.
  std::vector<Residual> residuals;
  std::vector<int> views_per_track(n, 0);
  {
    std::vector<char> obs_ok(t.observations(), 0);
    for (int k = 0; k < t.observations(); ++k) {
      const Projection pr =
          project(state.camera_matrix(t.camera_of(k)), state.X.col(t.track_of(k)));
      if (pr.depth > 0.0) {
        obs_ok[k] = 1;
        ++views_per_track[t.track_of(k)];
      } else {
        ++result.excluded_measurements;
      }
    }
    std::vector<char> track_ok(n, 1);
    for (int j = 0; j < n; ++j)
      if (views_per_track[j] < 2) {
        track_ok[j] = 0;
        result.excluded_points.push_back(j);
      }
    for (int k = 0; k < t.observations(); ++k)
      if (obs_ok[k] && track_ok[t.track_of(k)])
        residuals.push_back({t.camera_of(k), t.track_of(k),
                             Eigen::Vector2d(t.coords()(0, k), t.coords()(1, k))});
  }

  // active-point reindexing for the Schur system
  std::vector<int> pt_index(n, -1);
  std::vector<int> active_pts;
  for (const Residual& r : residuals)
    if (pt_index[r.pt] < 0) {
      pt_index[r.pt] = static_cast<int>(active_pts.size());
      active_pts.push_back(r.pt);
    }
  const int na = static_cast<int>(active_pts.size());

  double cost = robust_cost(state, residuals, cfg.huber_delta);
  result.cost_history.push_back(cost);

  double lambda = cfg.initial_lambda;
  int consecutive_rejections = 0;

  using CamJac = Eigen::Matrix<double, 2, Eigen::Dynamic>;

  for (int iter = 0; iter < cfg.max_iterations && !residuals.empty();) {
    // --- assemble the damped normal equations ---
    std::vector<Eigen::MatrixXd> Hcc(m, Eigen::MatrixXd::Zero(cam_dof, cam_dof));
    std::vector<Eigen::Matrix3d> Hpp(na, Eigen::Matrix3d::Zero());
    std::vector<Eigen::VectorXd> gc(m, Eigen::VectorXd::Zero(cam_dof));
    std::vector<Eigen::Vector3d> gp(na, Eigen::Vector3d::Zero());
    std::vector<Eigen::MatrixXd> Hcp(residuals.size());  // cam_dof x 3 per residual

    std::vector<Eigen::Matrix<double, 3, 4>> M(m);
    for (int i = 0; i < m; ++i) M[i] = state.camera_matrix(i);
    std::vector<Eigen::Matrix3d> R(m);
    if (cams.mode == CameraMode::Calibrated)
      for (int i = 0; i < m; ++i) R[i] = M[i].leftCols<3>();

    bool degenerate = false;
    for (size_t ridx = 0; ridx < residuals.size(); ++ridx) {
      const Residual& r = residuals[ridx];
      const Eigen::Vector3d Xw = state.X.col(r.pt);
      const Eigen::Vector4d Xh(Xw.x(), Xw.y(), Xw.z(), 1.0);
      const Eigen::Vector3d u = M[r.cam] * Xh;
      if (std::abs(u.z()) < 1e-15) {
        degenerate = true;
        break;
      }
      const double iz = 1.0 / u.z();
      Eigen::Matrix<double, 2, 3> proj;  // d(dehomogenized)/du
      proj << iz, 0.0, -u.x() * iz * iz,
              0.0, iz, -u.y() * iz * iz;

      const Eigen::Vector2d e = r.obs - Eigen::Vector2d(u.x() * iz, u.y() * iz);
      const double norm = e.norm();
      const auto [rho, drho] = huber_rho(norm, cfg.huber_delta);
      const double w = norm > 1e-15 ? drho / norm : 1.0;

      CamJac Jc(2, cam_dof);
      Eigen::Matrix<double, 2, 3> Jp;
      if (cams.mode == CameraMode::Calibrated) {
        // right-increment rotation tangent: du/dtheta = -R [X]_x
        Eigen::Matrix3d X_hat;
        X_hat << 0, -Xw.z(), Xw.y(),
                 Xw.z(), 0, -Xw.x(),
                 -Xw.y(), Xw.x(), 0;
        Jc.leftCols<3>() = proj * (R[r.cam] * X_hat);  // e = obs - pred
        Jc.rightCols<3>() = -proj;
        Jp = -proj * R[r.cam];
      } else {
        // P entries row-major: d e / d P(rowblk, col) = -proj(:, rowblk) * Xh(col)
        for (int row = 0; row < 3; ++row)
          for (int col = 0; col < 4; ++col)
            Jc.col(4 * row + col) = -proj.col(row) * Xh(col);
        Jp = -proj * M[r.cam].leftCols<3>();
      }

      const int pj = pt_index[r.pt];
      Hcc[r.cam].noalias() += w * Jc.transpose() * Jc;
      Hpp[pj].noalias() += w * Jp.transpose() * Jp;
      Hcp[ridx] = w * Jc.transpose() * Jp;
      gc[r.cam].noalias() += w * Jc.transpose() * e;
      gp[pj].noalias() += w * Jp.transpose() * e;
    }
    if (degenerate)
      throw Error(ErrorCode::SingularNormalEquations,
                  "a refined point collapsed onto a camera plane");

    // convergence on a vanishing gradient
    double gmax = 0.0;
    for (const auto& g : gc) gmax = std::max(gmax, g.cwiseAbs().maxCoeff());
    for (const auto& g : gp) gmax = std::max(gmax, g.cwiseAbs().maxCoeff());
    if (gmax < 1e-15) break;

    // --- try steps until one is accepted ---
    bool accepted = false;
    while (!accepted) {
      std::vector<Eigen::Matrix3d> Cinv(na);
      bool solvable = true;
      for (int pj = 0; pj < na; ++pj) {
        Eigen::Matrix3d C = Hpp[pj] + lambda * Eigen::Matrix3d::Identity();
        const Eigen::LDLT<Eigen::Matrix3d> ldlt(C);
        if (ldlt.info() != Eigen::Success) {
          solvable = false;
          break;
        }
        Cinv[pj] = ldlt.solve(Eigen::Matrix3d::Identity());
      }

      Eigen::MatrixXd S;
      Eigen::VectorXd rhs;
      Eigen::VectorXd delta_c;
      if (solvable) {
        // Schur complement on the camera block
        S = Eigen::MatrixXd::Zero(m * cam_dof, m * cam_dof);
        rhs = Eigen::VectorXd::Zero(m * cam_dof);
        for (int i = 0; i < m; ++i) {
          S.block(i * cam_dof, i * cam_dof, cam_dof, cam_dof) =
              Hcc[i] + lambda * Eigen::MatrixXd::Identity(cam_dof, cam_dof);
          rhs.segment(i * cam_dof, cam_dof) = -gc[i];
        }
        // E C^-1 terms, grouped per point
        std::vector<std::vector<int>> point_residuals(na);
        for (size_t ridx = 0; ridx < residuals.size(); ++ridx)
          point_residuals[pt_index[residuals[ridx].pt]].push_back(static_cast<int>(ridx));
        for (int pj = 0; pj < na; ++pj) {
          const auto& rs = point_residuals[pj];
          for (int a : rs) {
            const int ca = residuals[a].cam;
            const Eigen::MatrixXd Ea_Cinv = Hcp[a] * Cinv[pj];  // cam_dof x 3
            rhs.segment(ca * cam_dof, cam_dof) += Ea_Cinv * gp[pj];
            for (int b : rs) {
              const int cb = residuals[b].cam;
              S.block(ca * cam_dof, cb * cam_dof, cam_dof, cam_dof).noalias() -=
                  Ea_Cinv * Hcp[b].transpose();
            }
          }
        }
        const Eigen::LDLT<Eigen::MatrixXd> ldlt(S);
        if (ldlt.info() == Eigen::Success) {
          delta_c = ldlt.solve(rhs);
          if (!delta_c.allFinite()) solvable = false;
        } else {
          solvable = false;
        }
      }

      if (solvable) {
        // back-substitute the point increments
        Eigen::Matrix3Xd delta_p = Eigen::Matrix3Xd::Zero(3, na);
        for (size_t ridx = 0; ridx < residuals.size(); ++ridx) {
          const int pj = pt_index[residuals[ridx].pt];
          const int ci = residuals[ridx].cam;
          delta_p.col(pj) -= Cinv[pj] * (Hcp[ridx].transpose() *
                                         delta_c.segment(ci * cam_dof, cam_dof));
        }
        for (int pj = 0; pj < na; ++pj)
          delta_p.col(pj) -= Cinv[pj] * gp[pj];

        const double step_inf =
            std::max(delta_c.cwiseAbs().maxCoeff(), delta_p.cwiseAbs().maxCoeff());
        if (step_inf < 1e-14) {
          accepted = false;  // stationary
          iter = cfg.max_iterations;
          break;
        }

        State trial = state;
        for (int i = 0; i < m; ++i) {
          if (cams.mode == CameraMode::Calibrated) {
            const Eigen::Vector3d dth = delta_c.segment(i * cam_dof, 3);
            trial.q[i] = quat_multiply(state.q[i], quat_exp(dth)).normalized();
            trial.tr[i] += delta_c.segment(i * cam_dof + 3, 3);
          } else {
            for (int row = 0; row < 3; ++row)
              for (int col = 0; col < 4; ++col)
                trial.P[i](row, col) += delta_c(i * cam_dof + 4 * row + col);
          }
        }
        for (int pj = 0; pj < na; ++pj)
          trial.X.col(active_pts[pj]) += delta_p.col(pj);

        const double trial_cost = robust_cost(trial, residuals, cfg.huber_delta);
        if (std::isfinite(trial_cost) && trial_cost < cost) {
          const double rel_decrease = (cost - trial_cost) / std::max(cost, 1e-300);
          state = std::move(trial);
          cost = trial_cost;
          result.cost_history.push_back(cost);
          lambda = std::max(lambda * cfg.lambda_down, 1e-12);
          consecutive_rejections = 0;
          accepted = true;
          ++iter;
          if (rel_decrease < cfg.tolerance) iter = cfg.max_iterations;
          break;
        }
      }

      // rejected (or unsolvable): damp harder and retry
      lambda *= cfg.lambda_up;
      if (++consecutive_rejections >= 10) {
        iter = cfg.max_iterations;
        break;
      }
    }
    if (!accepted) break;
  }

  result.points.points = state.X;
  result.cameras.mode = cams.mode;
  if (cams.mode == CameraMode::Calibrated) {
    result.cameras.poses.resize(m);
    for (int i = 0; i < m; ++i) {
      result.cameras.poses[i].rotation = state.q[i];
      result.cameras.poses[i].translation = state.tr[i];
    }
  } else {
    result.cameras.cameras.resize(m);
    for (int i = 0; i < m; ++i)
      result.cameras.cameras[i] = normalize_projective_camera(state.P[i]);
  }
  return result;
}

}  // namespace esfm
