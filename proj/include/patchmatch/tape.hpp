#pragma once

// Eager reverse-mode differentiation over dense matrices. Each op computes
// its value immediately and records a pullback; backward() replays pullbacks
// in reverse creation order. All values are 64-bit.
//
// Besides generic matrix ops this carries the three structured ops the
// deformation model needs (6D rotation decoding, blended patch deformation,
// the pairwise rigidity energy), each with a hand-derived pullback that is
// checked against finite differences in the test suite.

#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

namespace patchmatch {

struct TapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Fixed sparse blending structure for one hierarchy level: per-vertex CSR
// rows of (patch id, normalized weight alpha_i(v)).
struct BlendContext {
  Eigen::MatrixXd rest_positions;   // V x 3
  Eigen::MatrixXd center_positions; // n x 3
  std::vector<int> row_offset;      // V+1
  std::vector<int> patch;
  std::vector<double> alpha;
};

// Precomputed rigidity sum structure: one entry per (ordered pair, vertex)
// term of the energy, with w = alpha_i(v) + alpha_j(v).
struct RigidityContext {
  Eigen::MatrixXd rest_positions;   // V x 3
  Eigen::MatrixXd center_positions; // n x 3
  struct Term {
    int i, j, v;
    double w;
  };
  std::vector<Term> terms;
};

class Tape {
 public:
  bool check_finite = true;

  int constant(Eigen::MatrixXd value) { return push(std::move(value), false, "constant"); }
  int parameter(Eigen::MatrixXd value) { return push(std::move(value), true, "parameter"); }

  const Eigen::MatrixXd& value(int i) const { return nodes_[i].value; }

  // Gradient of the last backward() loss w.r.t. node i (zeros if untouched).
  Eigen::MatrixXd gradient(int i) const {
    if (nodes_[i].has_grad) return nodes_[i].grad;
    return Eigen::MatrixXd::Zero(nodes_[i].value.rows(), nodes_[i].value.cols());
  }

  bool requires_grad(int i) const { return nodes_[i].needs_grad; }

  int add(int a, int b) {
    int out = push(value(a) + value(b), needs(a, b), "add");
    if (nodes_[out].needs_grad)
      nodes_[out].back = [a, b, out](Tape& t) {
        t.accum(a, t.grad(out));
        t.accum(b, t.grad(out));
      };
    return out;
  }

  int sub(int a, int b) {
    int out = push(value(a) - value(b), needs(a, b), "sub");
    if (nodes_[out].needs_grad)
      nodes_[out].back = [a, b, out](Tape& t) {
        t.accum(a, t.grad(out));
        t.accum(b, -t.grad(out));
      };
    return out;
  }

  int scale(int a, double s) {
    int out = push(value(a) * s, nodes_[a].needs_grad, "scale");
    if (nodes_[out].needs_grad)
      nodes_[out].back = [a, s, out](Tape& t) { t.accum(a, s * t.grad(out)); };
    return out;
  }

  int mul(int a, int b) {
    if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols())
      throw TapeError("mul: shape mismatch");
    int out = push(value(a).cwiseProduct(value(b)), needs(a, b), "mul");
    if (nodes_[out].needs_grad)
      nodes_[out].back = [a, b, out](Tape& t) {
        t.accum(a, t.grad(out).cwiseProduct(t.value(b)));
        t.accum(b, t.grad(out).cwiseProduct(t.value(a)));
      };
    return out;
  }

  int matmul(int a, int b) {
    if (value(a).cols() != value(b).rows()) throw TapeError("matmul: inner dimension mismatch");
    int out = push(value(a) * value(b), needs(a, b), "matmul");
    if (nodes_[out].needs_grad)
      nodes_[out].back = [a, b, out](Tape& t) {
        t.accum(a, t.grad(out) * t.value(b).transpose());
        t.accum(b, t.value(a).transpose() * t.grad(out));
      };
    return out;
  }

  // A * B^T
  int matmul_nt(int a, int b) {
    if (value(a).cols() != value(b).cols()) throw TapeError("matmul_nt: column count mismatch");
    int out = push(value(a) * value(b).transpose(), needs(a, b), "matmul_nt");
    if (nodes_[out].needs_grad)
      nodes_[out].back = [a, b, out](Tape& t) {
        t.accum(a, t.grad(out) * t.value(b));
        t.accum(b, t.grad(out).transpose() * t.value(a));
      };
    return out;
  }

  int transpose(int a) {
    int out = push(value(a).transpose(), nodes_[a].needs_grad, "transpose");
    if (nodes_[out].needs_grad)
      nodes_[out].back = [a, out](Tape& t) { t.accum(a, t.grad(out).transpose()); };
    return out;
  }

  int concat_cols(int a, int b) {
    if (value(a).rows() != value(b).rows()) throw TapeError("concat_cols: row count mismatch");
    Eigen::MatrixXd v(value(a).rows(), value(a).cols() + value(b).cols());
    v << value(a), value(b);
    int out = push(std::move(v), needs(a, b), "concat_cols");
    if (nodes_[out].needs_grad) {
      const Eigen::Index ca = value(a).cols(), cb = value(b).cols();
      nodes_[out].back = [a, b, ca, cb, out](Tape& t) {
        t.accum(a, t.grad(out).leftCols(ca));
        t.accum(b, t.grad(out).rightCols(cb));
      };
    }
    return out;
  }

  int gather_rows(int a, std::vector<int> idx) {
    Eigen::MatrixXd v(static_cast<Eigen::Index>(idx.size()), value(a).cols());
    for (size_t k = 0; k < idx.size(); ++k) {
      if (idx[k] < 0 || idx[k] >= value(a).rows()) throw TapeError("gather_rows: index out of range");
      v.row(static_cast<Eigen::Index>(k)) = value(a).row(idx[k]);
    }
    int out = push(std::move(v), nodes_[a].needs_grad, "gather_rows");
    if (nodes_[out].needs_grad) {
      auto ix = std::make_shared<std::vector<int>>(std::move(idx));
      nodes_[out].back = [a, ix, out](Tape& t) {
        Eigen::MatrixXd g = Eigen::MatrixXd::Zero(t.value(a).rows(), t.value(a).cols());
        for (size_t k = 0; k < ix->size(); ++k)
          g.row((*ix)[k]) += t.grad(out).row(static_cast<Eigen::Index>(k));
        t.accum(a, g);
      };
    }
    return out;
  }

  // out[s] = componentwise max over rows r with segment[r] == s.
  // Backward routes each entry's gradient to the first (lowest-index) argmax row.
  int segment_max(int a, const std::vector<int>& segment, int num_segments) {
    if (static_cast<Eigen::Index>(segment.size()) != value(a).rows())
      throw TapeError("segment_max: segment size mismatch");
    const Eigen::Index cols = value(a).cols();
    Eigen::MatrixXd v(num_segments, cols);
    auto arg = std::make_shared<Eigen::MatrixXi>(num_segments, cols);
    arg->setConstant(-1);
    for (Eigen::Index r = 0; r < value(a).rows(); ++r) {
      const int s = segment[static_cast<size_t>(r)];
      for (Eigen::Index c = 0; c < cols; ++c) {
        const double x = value(a)(r, c);
        if ((*arg)(s, c) < 0 || x > v(s, c)) {
          v(s, c) = x;
          (*arg)(s, c) = static_cast<int>(r);
        }
      }
    }
    for (int s = 0; s < num_segments; ++s)
      if (cols > 0 && (*arg)(s, 0) < 0) throw TapeError("segment_max: empty segment");
    int out = push(std::move(v), nodes_[a].needs_grad, "segment_max");
    if (nodes_[out].needs_grad)
      nodes_[out].back = [a, arg, out](Tape& t) {
        Eigen::MatrixXd g = Eigen::MatrixXd::Zero(t.value(a).rows(), t.value(a).cols());
        const auto& go = t.grad(out);
        for (Eigen::Index s = 0; s < go.rows(); ++s)
          for (Eigen::Index c = 0; c < go.cols(); ++c) g((*arg)(s, c), c) += go(s, c);
        t.accum(a, g);
      };
    return out;
  }

  int row_normalize(int a) {
    const Eigen::MatrixXd& x = value(a);
    Eigen::VectorXd norms = x.rowwise().norm();
    for (Eigen::Index r = 0; r < norms.size(); ++r)
      if (norms(r) < 1e-300)
        throw TapeError("row_normalize: zero-norm row " + std::to_string(r));
    Eigen::MatrixXd v = norms.cwiseInverse().asDiagonal() * x;
    int out = push(std::move(v), nodes_[a].needs_grad, "row_normalize");
    if (nodes_[out].needs_grad) {
      auto n = std::make_shared<Eigen::VectorXd>(std::move(norms));
      nodes_[out].back = [a, n, out](Tape& t) {
        const Eigen::MatrixXd& y = t.value(out);
        const Eigen::MatrixXd& g = t.grad(out);
        Eigen::VectorXd dot = (g.cwiseProduct(y)).rowwise().sum();
        Eigen::MatrixXd gx = (g - dot.asDiagonal() * y);
        gx = n->cwiseInverse().asDiagonal() * gx;
        t.accum(a, gx);
      };
    }
    return out;
  }

  // Row-stochastic softmax of x / tau with max-subtraction stabilization.
  int row_softmax(int a, double tau) {
    if (!(tau > 0.0)) throw TapeError("row_softmax: temperature must be positive");
    const Eigen::MatrixXd& x = value(a);
    Eigen::MatrixXd v(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const double mx = x.row(r).maxCoeff();
      v.row(r) = ((x.row(r).array() - mx) / tau).exp();
      v.row(r) /= v.row(r).sum();
    }
    int out = push(std::move(v), nodes_[a].needs_grad, "row_softmax");
    if (nodes_[out].needs_grad)
      nodes_[out].back = [a, tau, out](Tape& t) {
        const Eigen::MatrixXd& p = t.value(out);
        const Eigen::MatrixXd& g = t.grad(out);
        Eigen::VectorXd dot = (g.cwiseProduct(p)).rowwise().sum();
        Eigen::MatrixXd gx = p.cwiseProduct(g - dot.replicate(1, g.cols())) / tau;
        t.accum(a, gx);
      };
    return out;
  }

  // Squared Frobenius norm as a 1x1 node.
  int frob_sq(int a) {
    Eigen::MatrixXd v(1, 1);
    v(0, 0) = value(a).squaredNorm();
    int out = push(std::move(v), nodes_[a].needs_grad, "frob_sq");
    if (nodes_[out].needs_grad)
      nodes_[out].back = [a, out](Tape& t) { t.accum(a, 2.0 * t.grad(out)(0, 0) * t.value(a)); };
    return out;
  }

  int sparse_matmul(std::shared_ptr<const Eigen::SparseMatrix<double>> s, int a) {
    if (s->cols() != value(a).rows()) throw TapeError("sparse_matmul: dimension mismatch");
    int out = push(*s * value(a), nodes_[a].needs_grad, "sparse_matmul");
    if (nodes_[out].needs_grad)
      nodes_[out].back = [a, s, out](Tape& t) { t.accum(a, s->transpose() * t.grad(out)); };
    return out;
  }

  // ||P D P^T - Dx||_F^2 for constant symmetric D, Dx, as one fused node.
  // With E := P D P^T - Dx symmetric, dL/dP = 4 E (P D).
  int geodesic_term(int p, std::shared_ptr<const Eigen::MatrixXd> d,
                    std::shared_ptr<const Eigen::MatrixXd> dx) {
    if (value(p).cols() != d->rows() || value(p).rows() != dx->rows())
      throw TapeError("geodesic_term: dimension mismatch");
    auto m = std::make_shared<Eigen::MatrixXd>(value(p) * (*d));
    auto e = std::make_shared<Eigen::MatrixXd>((*m) * value(p).transpose() - (*dx));
    Eigen::MatrixXd v(1, 1);
    v(0, 0) = e->squaredNorm();
    int out = push(std::move(v), nodes_[p].needs_grad, "geodesic_term");
    if (nodes_[out].needs_grad)
      nodes_[out].back = [p, m, e, out](Tape& t) {
        t.accum(p, (4.0 * t.grad(out)(0, 0)) * ((*e) * (*m)));
      };
    return out;
  }

  // Gram-Schmidt 6D -> rotation rows (r1; r2; r3 = r1 x r2), emitted row-major
  // as an n x 9 matrix.
  int decode_rot6(int a) {
    const Eigen::MatrixXd& x = value(a);
    if (x.cols() != 6) throw TapeError("decode_rot6: expected 6 columns");
    Eigen::MatrixXd v(x.rows(), 9);
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      Eigen::Vector3d av = x.row(r).head<3>();
      Eigen::Vector3d bv = x.row(r).tail<3>();
      const double na = av.norm();
      if (na < 1e-12)
        throw TapeError("decode_rot6: degenerate first vector at row " + std::to_string(r));
      const Eigen::Vector3d r1 = av / na;
      Eigen::Vector3d w = bv - bv.dot(r1) * r1;
      const double nw = w.norm();
      if (nw < 1e-12)
        throw TapeError("decode_rot6: parallel input vectors at row " + std::to_string(r));
      const Eigen::Vector3d r2 = w / nw;
      const Eigen::Vector3d r3 = r1.cross(r2);
      v.row(r) << r1.transpose(), r2.transpose(), r3.transpose();
    }
    int out = push(std::move(v), nodes_[a].needs_grad, "decode_rot6");
    if (nodes_[out].needs_grad)
      nodes_[out].back = [a, out](Tape& t) {
        const Eigen::MatrixXd& x = t.value(a);
        const Eigen::MatrixXd& y = t.value(out);
        const Eigen::MatrixXd& g = t.grad(out);
        Eigen::MatrixXd gx = Eigen::MatrixXd::Zero(x.rows(), 6);
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
          const Eigen::Vector3d av = x.row(r).head<3>();
          const Eigen::Vector3d bv = x.row(r).tail<3>();
          const double na = av.norm();
          const Eigen::Vector3d r1 = y.row(r).segment<3>(0);
          const Eigen::Vector3d r2 = y.row(r).segment<3>(3);
          const Eigen::Vector3d w = bv - bv.dot(r1) * r1;
          const double nw = w.norm();
          const Eigen::Vector3d g1 = g.row(r).segment<3>(0);
          const Eigen::Vector3d g2 = g.row(r).segment<3>(3);
          const Eigen::Vector3d g3 = g.row(r).segment<3>(6);
          // r3 = r1 x r2 contributes to both factors.
          const Eigen::Vector3d g2t = g2 + g3.cross(r1);
          const Eigen::Vector3d gw = (g2t - g2t.dot(r2) * r2) / nw;
          const Eigen::Vector3d gb = gw - gw.dot(r1) * r1;
          const Eigen::Vector3d g1t =
              g1 + r2.cross(g3) - gw.dot(r1) * bv - bv.dot(r1) * gw;
          const Eigen::Vector3d ga = (g1t - g1t.dot(r1) * r1) / na;
          gx.row(r).head<3>() = ga.transpose();
          gx.row(r).tail<3>() = gb.transpose();
        }
        t.accum(a, gx);
      };
    return out;
  }

  // Blended patch-rigid deformation: x(v) = sum_i alpha_i(v) (R_i (x0(v)-c_i) + u_i).
  // rot9 is n x 9 row-major rotations, u is n x 3 new center positions.
  int blend_deform(int rot9, int u, std::shared_ptr<const BlendContext> ctx) {
    const Eigen::MatrixXd& R = value(rot9);
    const Eigen::MatrixXd& U = value(u);
    const int nv = static_cast<int>(ctx->rest_positions.rows());
    if (R.cols() != 9 || U.cols() != 3 || R.rows() != U.rows() ||
        R.rows() != ctx->center_positions.rows())
      throw TapeError("blend_deform: shape mismatch");
    Eigen::MatrixXd v = Eigen::MatrixXd::Zero(nv, 3);
    for (int vert = 0; vert < nv; ++vert) {
      for (int e = ctx->row_offset[vert]; e < ctx->row_offset[vert + 1]; ++e) {
        const int i = ctx->patch[e];
        const double al = ctx->alpha[e];
        const Eigen::Vector3d p =
            ctx->rest_positions.row(vert).transpose() - ctx->center_positions.row(i).transpose();
        Eigen::Vector3d xi;
        for (int r = 0; r < 3; ++r)
          xi(r) = R(i, 3 * r) * p(0) + R(i, 3 * r + 1) * p(1) + R(i, 3 * r + 2) * p(2) + U(i, r);
        v.row(vert) += al * xi.transpose();
      }
    }
    int out = push(std::move(v), needs(rot9, u), "blend_deform");
    if (nodes_[out].needs_grad)
      nodes_[out].back = [rot9, u, ctx, out](Tape& t) {
        const Eigen::MatrixXd& g = t.grad(out);
        Eigen::MatrixXd gR = Eigen::MatrixXd::Zero(t.value(rot9).rows(), 9);
        Eigen::MatrixXd gU = Eigen::MatrixXd::Zero(t.value(u).rows(), 3);
        const int nv = static_cast<int>(ctx->rest_positions.rows());
        for (int vert = 0; vert < nv; ++vert) {
          for (int e = ctx->row_offset[vert]; e < ctx->row_offset[vert + 1]; ++e) {
            const int i = ctx->patch[e];
            const double al = ctx->alpha[e];
            const Eigen::Vector3d p = ctx->rest_positions.row(vert).transpose() -
                                      ctx->center_positions.row(i).transpose();
            for (int r = 0; r < 3; ++r) {
              const double gr = al * g(vert, r);
              gU(i, r) += gr;
              gR(i, 3 * r) += gr * p(0);
              gR(i, 3 * r + 1) += gr * p(1);
              gR(i, 3 * r + 2) += gr * p(2);
            }
          }
        }
        t.accum(rot9, gR);
        t.accum(u, gU);
      };
    return out;
  }

  // Rigidity energy over precomputed (pair, vertex) terms:
  // sum w * || (R_i p_vi + u_i) - (R_j p_vj + u_j) ||^2 with p_vi = x0(v) - c_i.
  int rigidity(int rot9, int u, std::shared_ptr<const RigidityContext> ctx) {
    const Eigen::MatrixXd& R = value(rot9);
    const Eigen::MatrixXd& U = value(u);
    auto apply = [&](int i, const Eigen::Vector3d& p) {
      Eigen::Vector3d x;
      for (int r = 0; r < 3; ++r)
        x(r) = R(i, 3 * r) * p(0) + R(i, 3 * r + 1) * p(1) + R(i, 3 * r + 2) * p(2) + U(i, r);
      return x;
    };
    double energy = 0.0;
    for (const auto& term : ctx->terms) {
      const Eigen::Vector3d x0v = ctx->rest_positions.row(term.v).transpose();
      const Eigen::Vector3d pi = x0v - ctx->center_positions.row(term.i).transpose();
      const Eigen::Vector3d pj = x0v - ctx->center_positions.row(term.j).transpose();
      energy += term.w * (apply(term.i, pi) - apply(term.j, pj)).squaredNorm();
    }
    Eigen::MatrixXd v(1, 1);
    v(0, 0) = energy;
    int out = push(std::move(v), needs(rot9, u), "rigidity");
    if (nodes_[out].needs_grad)
      nodes_[out].back = [rot9, u, ctx, out](Tape& t) {
        const Eigen::MatrixXd& R = t.value(rot9);
        const Eigen::MatrixXd& U = t.value(u);
        const double g0 = t.grad(out)(0, 0);
        Eigen::MatrixXd gR = Eigen::MatrixXd::Zero(R.rows(), 9);
        Eigen::MatrixXd gU = Eigen::MatrixXd::Zero(U.rows(), 3);
        auto apply = [&](int i, const Eigen::Vector3d& p) {
          Eigen::Vector3d x;
          for (int r = 0; r < 3; ++r)
            x(r) = R(i, 3 * r) * p(0) + R(i, 3 * r + 1) * p(1) + R(i, 3 * r + 2) * p(2) + U(i, r);
          return x;
        };
        for (const auto& term : ctx->terms) {
          const Eigen::Vector3d x0v = ctx->rest_positions.row(term.v).transpose();
          const Eigen::Vector3d pi = x0v - ctx->center_positions.row(term.i).transpose();
          const Eigen::Vector3d pj = x0v - ctx->center_positions.row(term.j).transpose();
          const Eigen::Vector3d d = apply(term.i, pi) - apply(term.j, pj);
          const Eigen::Vector3d c = (2.0 * term.w * g0) * d;
          for (int r = 0; r < 3; ++r) {
            gU(term.i, r) += c(r);
            gU(term.j, r) -= c(r);
            gR(term.i, 3 * r) += c(r) * pi(0);
            gR(term.i, 3 * r + 1) += c(r) * pi(1);
            gR(term.i, 3 * r + 2) += c(r) * pi(2);
            gR(term.j, 3 * r) -= c(r) * pj(0);
            gR(term.j, 3 * r + 1) -= c(r) * pj(1);
            gR(term.j, 3 * r + 2) -= c(r) * pj(2);
          }
        }
        t.accum(rot9, gR);
        t.accum(u, gU);
      };
    return out;
  }

  // Reverse pass from a scalar loss node. Leaves untouched by the loss keep
  // zero gradients.
  void backward(int loss) {
    if (value(loss).rows() != 1 || value(loss).cols() != 1)
      throw TapeError("backward: loss node must be 1x1");
    for (auto& n : nodes_) n.has_grad = false;
    accum(loss, Eigen::MatrixXd::Ones(1, 1));
    for (int i = loss; i >= 0; --i) {
      auto& n = nodes_[i];
      if (!n.has_grad || !n.back) continue;
      if (check_finite && !n.grad.allFinite())
        throw TapeError("backward: nonfinite adjoint at op '" + n.op + "' (node " +
                        std::to_string(i) + ")");
      n.back(*this);
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Eigen::MatrixXd value;
    Eigen::MatrixXd grad;
    bool has_grad = false;
    bool needs_grad = false;
    std::string op;
    std::function<void(Tape&)> back;
  };

  std::vector<Node> nodes_;

  bool needs(int a, int b) const { return nodes_[a].needs_grad || nodes_[b].needs_grad; }

  int push(Eigen::MatrixXd value, bool needs_grad, const char* op) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    n.op = op;
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  const Eigen::MatrixXd& grad(int i) const { return nodes_[i].grad; }

  template <typename Derived>
  void accum(int i, const Eigen::MatrixBase<Derived>& g) {
    auto& n = nodes_[i];
    if (!n.has_grad) {
      n.grad = g;
      n.has_grad = true;
    } else {
      n.grad += g;
    }
  }
};

}  // namespace patchmatch
