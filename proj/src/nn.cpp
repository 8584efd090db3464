#include "amdiff/nn.hpp"

#include <algorithm>
#include <cmath>

namespace amdiff::nn {

long long shape_numel(const Shape& s) {
    long long n = 1;
    for (int d : s) n *= d;
    return n;
}

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

std::string shape_str(const Shape& s) {
    std::string out = "{";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "}";
}

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw ConfigError(msg);
}

void require_same(const Var& a, const Var& b, const char* what) {
    if (!same_shape(a->shape, b->shape))
        throw ConfigError(std::string(what) + ": shape mismatch " + shape_str(a->shape) + " vs " +
                          shape_str(b->shape));
}

/// {C, D, H, W} accessors for spatial ops.
struct Dims4 {
    int c, d, h, w;
    long long spatial() const { return static_cast<long long>(d) * h * w; }
};

Dims4 dims4(const Var& x, const char* what) {
    if (x->shape.size() != 4)
        throw ConfigError(std::string(what) + ": expected a {C,D,H,W} tensor, got " +
                          shape_str(x->shape));
    return {x->shape[0], x->shape[1], x->shape[2], x->shape[3]};
}

}  // namespace

Var Graph::adopt(Shape shape, bool requires_grad, std::function<void()> backprop) {
    Var n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    n->backprop = std::move(backprop);
    if (recording_) nodes_.push_back(n);
    return n;
}

Var Graph::constant(Shape shape, std::vector<double> v) {
    require(shape_numel(shape) == static_cast<long long>(v.size()),
            "constant: value length does not match shape");
    Var n = adopt(std::move(shape), false, nullptr);
    n->val = std::move(v);
    return n;
}

Var Graph::scalar(double v) { return constant({1}, {v}); }

Var Graph::leaf(Shape shape, std::vector<double> v, bool requires_grad) {
    require(shape_numel(shape) == static_cast<long long>(v.size()),
            "leaf: value length does not match shape");
    Var n = adopt(std::move(shape), requires_grad && recording_, nullptr);
    n->val = std::move(v);
    return n;
}

void Graph::backward(const Var& loss) {
    require(loss->numel() == 1, "backward: loss must be scalar");
    require(recording_, "backward: graph is not recording");
    loss->ensure_grad();
    loss->grad[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node& n = **it;
        if (n.backprop && n.requires_grad && !n.grad.empty()) n.backprop();
    }
}

namespace {

/// Shared construction for ops: computes requires_grad, attaches closure.
template <typename BackFn>
Var finish(Graph& g, Shape shape, std::vector<double> val, bool any_parent_grad, BackFn&& fn) {
    const bool req = g.recording() && any_parent_grad;
    Var out = g.adopt(std::move(shape), req, nullptr);
    out->val = std::move(val);
    if (req) out->backprop = fn(out.get());
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Var add(Graph& g, const Var& a, const Var& b) {
    require_same(a, b, "add");
    std::vector<double> v(a->val.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a->val[i] + b->val[i];
    return finish(g, a->shape, std::move(v), a->requires_grad || b->requires_grad,
                  [a, b](Node* out) {
                      return [a, b, out]() {
                          if (a->requires_grad) {
                              a->ensure_grad();
                              for (size_t i = 0; i < out->grad.size(); ++i)
                                  a->grad[i] += out->grad[i];
                          }
                          if (b->requires_grad) {
                              b->ensure_grad();
                              for (size_t i = 0; i < out->grad.size(); ++i)
                                  b->grad[i] += out->grad[i];
                          }
                      };
                  });
}

Var sub(Graph& g, const Var& a, const Var& b) {
    require_same(a, b, "sub");
    std::vector<double> v(a->val.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a->val[i] - b->val[i];
    return finish(g, a->shape, std::move(v), a->requires_grad || b->requires_grad,
                  [a, b](Node* out) {
                      return [a, b, out]() {
                          if (a->requires_grad) {
                              a->ensure_grad();
                              for (size_t i = 0; i < out->grad.size(); ++i)
                                  a->grad[i] += out->grad[i];
                          }
                          if (b->requires_grad) {
                              b->ensure_grad();
                              for (size_t i = 0; i < out->grad.size(); ++i)
                                  b->grad[i] -= out->grad[i];
                          }
                      };
                  });
}

Var mul(Graph& g, const Var& a, const Var& b) {
    require_same(a, b, "mul");
    std::vector<double> v(a->val.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a->val[i] * b->val[i];
    return finish(g, a->shape, std::move(v), a->requires_grad || b->requires_grad,
                  [a, b](Node* out) {
                      return [a, b, out]() {
                          if (a->requires_grad) {
                              a->ensure_grad();
                              for (size_t i = 0; i < out->grad.size(); ++i)
                                  a->grad[i] += out->grad[i] * b->val[i];
                          }
                          if (b->requires_grad) {
                              b->ensure_grad();
                              for (size_t i = 0; i < out->grad.size(); ++i)
                                  b->grad[i] += out->grad[i] * a->val[i];
                          }
                      };
                  });
}

Var div(Graph& g, const Var& a, const Var& b) {
    require_same(a, b, "div");
    std::vector<double> v(a->val.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a->val[i] / b->val[i];
    return finish(g, a->shape, std::move(v), a->requires_grad || b->requires_grad,
                  [a, b](Node* out) {
                      return [a, b, out]() {
                          if (a->requires_grad) {
                              a->ensure_grad();
                              for (size_t i = 0; i < out->grad.size(); ++i)
                                  a->grad[i] += out->grad[i] / b->val[i];
                          }
                          if (b->requires_grad) {
                              b->ensure_grad();
                              for (size_t i = 0; i < out->grad.size(); ++i)
                                  b->grad[i] -= out->grad[i] * a->val[i] / (b->val[i] * b->val[i]);
                          }
                      };
                  });
}

Var neg(Graph& g, const Var& a) { return mul_scalar(g, a, -1.0); }

Var add_scalar(Graph& g, const Var& a, double c) {
    std::vector<double> v(a->val.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a->val[i] + c;
    return finish(g, a->shape, std::move(v), a->requires_grad, [a](Node* out) {
        return [a, out]() {
            a->ensure_grad();
            for (size_t i = 0; i < out->grad.size(); ++i) a->grad[i] += out->grad[i];
        };
    });
}

Var mul_scalar(Graph& g, const Var& a, double c) {
    std::vector<double> v(a->val.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a->val[i] * c;
    return finish(g, a->shape, std::move(v), a->requires_grad, [a, c](Node* out) {
        return [a, c, out]() {
            a->ensure_grad();
            for (size_t i = 0; i < out->grad.size(); ++i) a->grad[i] += out->grad[i] * c;
        };
    });
}

Var abs(Graph& g, const Var& a) {
    std::vector<double> v(a->val.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = std::fabs(a->val[i]);
    return finish(g, a->shape, std::move(v), a->requires_grad, [a](Node* out) {
        return [a, out]() {
            a->ensure_grad();
            for (size_t i = 0; i < out->grad.size(); ++i) {
                const double s = a->val[i] > 0.0 ? 1.0 : (a->val[i] < 0.0 ? -1.0 : 0.0);
                a->grad[i] += out->grad[i] * s;
            }
        };
    });
}

Var log(Graph& g, const Var& a) {
    std::vector<double> v(a->val.size());
    for (size_t i = 0; i < v.size(); ++i) {
        if (!(a->val[i] > 0.0)) throw NumericError("log: non-positive input");
        v[i] = std::log(a->val[i]);
    }
    return finish(g, a->shape, std::move(v), a->requires_grad, [a](Node* out) {
        return [a, out]() {
            a->ensure_grad();
            for (size_t i = 0; i < out->grad.size(); ++i) a->grad[i] += out->grad[i] / a->val[i];
        };
    });
}

Var pow_const(Graph& g, const Var& a, double p) {
    require(p >= 1.0, "pow_const: exponent must be >= 1 for a differentiable op at 0");
    std::vector<double> v(a->val.size());
    for (size_t i = 0; i < v.size(); ++i) {
        if (a->val[i] < 0.0) throw NumericError("pow_const: negative base");
        v[i] = std::pow(a->val[i], p);
    }
    return finish(g, a->shape, std::move(v), a->requires_grad, [a, p](Node* out) {
        return [a, p, out]() {
            a->ensure_grad();
            for (size_t i = 0; i < out->grad.size(); ++i) {
                const double base = a->val[i];
                const double d = base == 0.0 ? 0.0 : p * std::pow(base, p - 1.0);
                a->grad[i] += out->grad[i] * d;
            }
        };
    });
}

Var clamp(Graph& g, const Var& a, double lo, double hi) {
    std::vector<double> v(a->val.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = std::clamp(a->val[i], lo, hi);
    return finish(g, a->shape, std::move(v), a->requires_grad, [a, lo, hi](Node* out) {
        return [a, lo, hi, out]() {
            a->ensure_grad();
            for (size_t i = 0; i < out->grad.size(); ++i)
                if (a->val[i] >= lo && a->val[i] <= hi) a->grad[i] += out->grad[i];
        };
    });
}

Var sigmoid(Graph& g, const Var& a) {
    std::vector<double> v(a->val.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = 1.0 / (1.0 + std::exp(-a->val[i]));
    return finish(g, a->shape, std::move(v), a->requires_grad, [a](Node* out) {
        return [a, out]() {
            a->ensure_grad();
            for (size_t i = 0; i < out->grad.size(); ++i) {
                const double y = out->val[i];
                a->grad[i] += out->grad[i] * y * (1.0 - y);
            }
        };
    });
}

Var silu(Graph& g, const Var& a) {
    std::vector<double> v(a->val.size());
    for (size_t i = 0; i < v.size(); ++i) {
        const double s = 1.0 / (1.0 + std::exp(-a->val[i]));
        v[i] = a->val[i] * s;
    }
    return finish(g, a->shape, std::move(v), a->requires_grad, [a](Node* out) {
        return [a, out]() {
            a->ensure_grad();
            for (size_t i = 0; i < out->grad.size(); ++i) {
                const double s = 1.0 / (1.0 + std::exp(-a->val[i]));
                a->grad[i] += out->grad[i] * (s * (1.0 + a->val[i] * (1.0 - s)));
            }
        };
    });
}

Var tanh(Graph& g, const Var& a) {
    std::vector<double> v(a->val.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = std::tanh(a->val[i]);
    return finish(g, a->shape, std::move(v), a->requires_grad, [a](Node* out) {
        return [a, out]() {
            a->ensure_grad();
            for (size_t i = 0; i < out->grad.size(); ++i) {
                const double y = out->val[i];
                a->grad[i] += out->grad[i] * (1.0 - y * y);
            }
        };
    });
}

Var detach(Graph& g, const Var& a) { return g.constant(a->shape, a->val); }

// ---------------------------------------------------------------------------
// reductions / reshape
// ---------------------------------------------------------------------------

Var sum_all(Graph& g, const Var& a) {
    double s = 0.0;
    for (double v : a->val) s += v;
    return finish(g, {1}, {s}, a->requires_grad, [a](Node* out) {
        return [a, out]() {
            a->ensure_grad();
            const double gy = out->grad[0];
            for (size_t i = 0; i < a->grad.size(); ++i) a->grad[i] += gy;
        };
    });
}

Var mean_all(Graph& g, const Var& a) {
    return mul_scalar(g, sum_all(g, a), 1.0 / static_cast<double>(a->numel()));
}

Var reshape(Graph& g, const Var& a, Shape s) {
    require(shape_numel(s) == a->numel(), "reshape: element count mismatch");
    return finish(g, std::move(s), a->val, a->requires_grad, [a](Node* out) {
        return [a, out]() {
            a->ensure_grad();
            for (size_t i = 0; i < out->grad.size(); ++i) a->grad[i] += out->grad[i];
        };
    });
}

// ---------------------------------------------------------------------------
// channel / spatial structure
// ---------------------------------------------------------------------------

Var concat_channels(Graph& g, const Var& a, const Var& b) {
    const Dims4 da = dims4(a, "concat_channels");
    const Dims4 db = dims4(b, "concat_channels");
    require(da.d == db.d && da.h == db.h && da.w == db.w,
            "concat_channels: spatial shapes differ");
    std::vector<double> v;
    v.reserve(a->val.size() + b->val.size());
    v.insert(v.end(), a->val.begin(), a->val.end());
    v.insert(v.end(), b->val.begin(), b->val.end());
    return finish(g, {da.c + db.c, da.d, da.h, da.w}, std::move(v),
                  a->requires_grad || b->requires_grad, [a, b](Node* out) {
                      return [a, b, out]() {
                          const size_t na = a->val.size();
                          if (a->requires_grad) {
                              a->ensure_grad();
                              for (size_t i = 0; i < na; ++i) a->grad[i] += out->grad[i];
                          }
                          if (b->requires_grad) {
                              b->ensure_grad();
                              for (size_t i = 0; i < b->val.size(); ++i)
                                  b->grad[i] += out->grad[na + i];
                          }
                      };
                  });
}

Var slice_channels(Graph& g, const Var& a, int c0, int c1) {
    const Dims4 da = dims4(a, "slice_channels");
    require(0 <= c0 && c0 < c1 && c1 <= da.c, "slice_channels: bad channel range");
    const long long sp = da.spatial();
    std::vector<double> v(a->val.begin() + c0 * sp, a->val.begin() + c1 * sp);
    return finish(g, {c1 - c0, da.d, da.h, da.w}, std::move(v), a->requires_grad,
                  [a, c0, sp](Node* out) {
                      return [a, c0, sp, out]() {
                          a->ensure_grad();
                          const size_t off = static_cast<size_t>(c0) * sp;
                          for (size_t i = 0; i < out->grad.size(); ++i)
                              a->grad[off + i] += out->grad[i];
                      };
                  });
}

Var add_channel_bias(Graph& g, const Var& x, const Var& bias) {
    const Dims4 dx = dims4(x, "add_channel_bias");
    require(bias->shape == Shape{dx.c}, "add_channel_bias: bias must be {C}");
    const long long sp = dx.spatial();
    std::vector<double> v(x->val.size());
    for (int c = 0; c < dx.c; ++c) {
        const double bc = bias->val[c];
        for (long long i = 0; i < sp; ++i) v[c * sp + i] = x->val[c * sp + i] + bc;
    }
    return finish(g, x->shape, std::move(v), x->requires_grad || bias->requires_grad,
                  [x, bias, sp](Node* out) {
                      return [x, bias, sp, out]() {
                          const int C = x->shape[0];
                          if (x->requires_grad) {
                              x->ensure_grad();
                              for (size_t i = 0; i < out->grad.size(); ++i)
                                  x->grad[i] += out->grad[i];
                          }
                          if (bias->requires_grad) {
                              bias->ensure_grad();
                              for (int c = 0; c < C; ++c) {
                                  double s = 0.0;
                                  for (long long i = 0; i < sp; ++i) s += out->grad[c * sp + i];
                                  bias->grad[c] += s;
                              }
                          }
                      };
                  });
}

Var scale_channels(Graph& g, const Var& x, const Var& scale) {
    const Dims4 dx = dims4(x, "scale_channels");
    require(scale->shape == Shape{dx.c}, "scale_channels: scale must be {C}");
    const long long sp = dx.spatial();
    std::vector<double> v(x->val.size());
    for (int c = 0; c < dx.c; ++c) {
        const double sc = scale->val[c];
        for (long long i = 0; i < sp; ++i) v[c * sp + i] = x->val[c * sp + i] * sc;
    }
    return finish(g, x->shape, std::move(v), x->requires_grad || scale->requires_grad,
                  [x, scale, sp](Node* out) {
                      return [x, scale, sp, out]() {
                          const int C = x->shape[0];
                          if (x->requires_grad) {
                              x->ensure_grad();
                              for (int c = 0; c < C; ++c) {
                                  const double sc = scale->val[c];
                                  for (long long i = 0; i < sp; ++i)
                                      x->grad[c * sp + i] += out->grad[c * sp + i] * sc;
                              }
                          }
                          if (scale->requires_grad) {
                              scale->ensure_grad();
                              for (int c = 0; c < C; ++c) {
                                  double s = 0.0;
                                  for (long long i = 0; i < sp; ++i)
                                      s += out->grad[c * sp + i] * x->val[c * sp + i];
                                  scale->grad[c] += s;
                              }
                          }
                      };
                  });
}

Var mul_spatial(Graph& g, const Var& x, const Var& gate) {
    const Dims4 dx = dims4(x, "mul_spatial");
    const Dims4 dg = dims4(gate, "mul_spatial");
    require(dg.c == 1 && dg.d == dx.d && dg.h == dx.h && dg.w == dx.w,
            "mul_spatial: gate must be {1,D,H,W} matching x");
    const long long sp = dx.spatial();
    std::vector<double> v(x->val.size());
    for (int c = 0; c < dx.c; ++c)
        for (long long i = 0; i < sp; ++i) v[c * sp + i] = x->val[c * sp + i] * gate->val[i];
    return finish(g, x->shape, std::move(v), x->requires_grad || gate->requires_grad,
                  [x, gate, sp](Node* out) {
                      return [x, gate, sp, out]() {
                          const int C = x->shape[0];
                          if (x->requires_grad) {
                              x->ensure_grad();
                              for (int c = 0; c < C; ++c)
                                  for (long long i = 0; i < sp; ++i)
                                      x->grad[c * sp + i] += out->grad[c * sp + i] * gate->val[i];
                          }
                          if (gate->requires_grad) {
                              gate->ensure_grad();
                              for (int c = 0; c < C; ++c)
                                  for (long long i = 0; i < sp; ++i)
                                      gate->grad[i] += out->grad[c * sp + i] * x->val[c * sp + i];
                          }
                      };
                  });
}

Var global_avg_pool(Graph& g, const Var& x) {
    const Dims4 dx = dims4(x, "global_avg_pool");
    const long long sp = dx.spatial();
    std::vector<double> v(dx.c);
    for (int c = 0; c < dx.c; ++c) {
        double s = 0.0;
        for (long long i = 0; i < sp; ++i) s += x->val[c * sp + i];
        v[c] = s / static_cast<double>(sp);
    }
    return finish(g, {dx.c}, std::move(v), x->requires_grad, [x, sp](Node* out) {
        return [x, sp, out]() {
            x->ensure_grad();
            const int C = x->shape[0];
            for (int c = 0; c < C; ++c) {
                const double gy = out->grad[c] / static_cast<double>(sp);
                for (long long i = 0; i < sp; ++i) x->grad[c * sp + i] += gy;
            }
        };
    });
}

Var softmax_channels(Graph& g, const Var& x) {
    const Dims4 dx = dims4(x, "softmax_channels");
    const long long sp = dx.spatial();
    std::vector<double> v(x->val.size());
    for (long long i = 0; i < sp; ++i) {
        double mx = -1e300;
        for (int c = 0; c < dx.c; ++c) mx = std::max(mx, x->val[c * sp + i]);
        double sum = 0.0;
        for (int c = 0; c < dx.c; ++c) {
            const double e = std::exp(x->val[c * sp + i] - mx);
            v[c * sp + i] = e;
            sum += e;
        }
        for (int c = 0; c < dx.c; ++c) v[c * sp + i] /= sum;
    }
    return finish(g, x->shape, std::move(v), x->requires_grad, [x, sp](Node* out) {
        return [x, sp, out]() {
            x->ensure_grad();
            const int C = x->shape[0];
            for (long long i = 0; i < sp; ++i) {
                double dot = 0.0;
                for (int c = 0; c < C; ++c) dot += out->grad[c * sp + i] * out->val[c * sp + i];
                for (int c = 0; c < C; ++c)
                    x->grad[c * sp + i] +=
                        out->val[c * sp + i] * (out->grad[c * sp + i] - dot);
            }
        };
    });
}

Var upsample_nearest2(Graph& g, const Var& x) {
    const Dims4 dx = dims4(x, "upsample_nearest2");
    const int D2 = dx.d * 2, H2 = dx.h * 2, W2 = dx.w * 2;
    std::vector<double> v(static_cast<size_t>(dx.c) * D2 * H2 * W2);
    for (int c = 0; c < dx.c; ++c)
        for (int d = 0; d < D2; ++d)
            for (int h = 0; h < H2; ++h) {
                const double* src =
                    x->val.data() + ((static_cast<long long>(c) * dx.d + d / 2) * dx.h + h / 2) * dx.w;
                double* dst =
                    v.data() + ((static_cast<long long>(c) * D2 + d) * H2 + h) * W2;
                for (int w = 0; w < W2; ++w) dst[w] = src[w / 2];
            }
    return finish(g, {dx.c, D2, H2, W2}, std::move(v), x->requires_grad, [x, dx](Node* out) {
        return [x, dx, out]() {
            x->ensure_grad();
            const int D2 = dx.d * 2, H2 = dx.h * 2, W2 = dx.w * 2;
            for (int c = 0; c < dx.c; ++c)
                for (int d = 0; d < D2; ++d)
                    for (int h = 0; h < H2; ++h) {
                        double* dst = x->grad.data() +
                                      ((static_cast<long long>(c) * dx.d + d / 2) * dx.h + h / 2) *
                                          dx.w;
                        const double* src =
                            out->grad.data() + ((static_cast<long long>(c) * D2 + d) * H2 + h) * W2;
                        for (int w = 0; w < W2; ++w) dst[w / 2] += src[w];
                    }
        };
    });
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

namespace {

struct ConvPlan {
    int cin, cout, k, stride, pad;
    int di, hi, wi;  // input spatial
    int do_, ho, wo;  // output spatial
};

ConvPlan conv_plan(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    const Dims4 dx = dims4(x, "conv3d");
    require(w->shape.size() == 5, "conv3d: weight must be {Cout,Cin,K,K,K}");
    const int cout = w->shape[0], cin = w->shape[1], k = w->shape[2];
    require(w->shape[3] == k && w->shape[4] == k, "conv3d: kernel must be cubic");
    require(cin == dx.c, "conv3d: input channels mismatch");
    require(b->shape == Shape{cout}, "conv3d: bias must be {Cout}");
    require(stride >= 1 && pad >= 0, "conv3d: bad stride/pad");
    ConvPlan p;
    p.cin = cin;
    p.cout = cout;
    p.k = k;
    p.stride = stride;
    p.pad = pad;
    p.di = dx.d;
    p.hi = dx.h;
    p.wi = dx.w;
    auto osz = [&](int in) { return (in + 2 * pad - k) / stride + 1; };
    p.do_ = osz(dx.d);
    p.ho = osz(dx.h);
    p.wo = osz(dx.w);
    require(p.do_ >= 1 && p.ho >= 1 && p.wo >= 1, "conv3d: kernel larger than padded input");
    return p;
}

// Valid output range along one axis for kernel offset kk: positions o with
// 0 <= o*stride - pad + kk < in.
inline void axis_range(int in, int out, int stride, int pad, int kk, int& o0, int& o1) {
    int lo = pad - kk;
    o0 = lo <= 0 ? 0 : (lo + stride - 1) / stride;
    int hi = in - 1 + pad - kk;
    o1 = hi < 0 ? -1 : std::min(out - 1, hi / stride);
}

}  // namespace

Var conv3d(Graph& g, const Var& x, const Var& w, const Var& b, int stride, int pad) {
    const ConvPlan p = conv_plan(x, w, b, stride, pad);
    const long long osp = static_cast<long long>(p.do_) * p.ho * p.wo;
    std::vector<double> v(static_cast<size_t>(p.cout) * osp);

    const double* xp = x->val.data();
    const double* wp = w->val.data();
    for (int co = 0; co < p.cout; ++co) {
        double* oc = v.data() + co * osp;
        std::fill(oc, oc + osp, b->val[co]);
        for (int ci = 0; ci < p.cin; ++ci) {
            const double* xc = xp + static_cast<long long>(ci) * p.di * p.hi * p.wi;
            const double* wc = wp + ((static_cast<long long>(co) * p.cin + ci) * p.k) * p.k * p.k;
            for (int kd = 0; kd < p.k; ++kd) {
                int od0, od1;
                axis_range(p.di, p.do_, p.stride, p.pad, kd, od0, od1);
                for (int kh = 0; kh < p.k; ++kh) {
                    int oh0, oh1;
                    axis_range(p.hi, p.ho, p.stride, p.pad, kh, oh0, oh1);
                    for (int kw = 0; kw < p.k; ++kw) {
                        int ow0, ow1;
                        axis_range(p.wi, p.wo, p.stride, p.pad, kw, ow0, ow1);
                        const double wv = wc[(kd * p.k + kh) * p.k + kw];
                        if (wv == 0.0) continue;
                        for (int od = od0; od <= od1; ++od) {
                            const int id = od * p.stride - p.pad + kd;
                            for (int oh = oh0; oh <= oh1; ++oh) {
                                const int ih = oh * p.stride - p.pad + kh;
                                const double* xr =
                                    xc + (static_cast<long long>(id) * p.hi + ih) * p.wi;
                                double* orow = oc + (static_cast<long long>(od) * p.ho + oh) * p.wo;
                                if (p.stride == 1) {
                                    const double* xs = xr - p.pad + kw;
                                    for (int ow = ow0; ow <= ow1; ++ow)
                                        orow[ow] += wv * xs[ow];
                                } else {
                                    for (int ow = ow0; ow <= ow1; ++ow)
                                        orow[ow] += wv * xr[ow * p.stride - p.pad + kw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    return finish(g, {p.cout, p.do_, p.ho, p.wo}, std::move(v),
                  x->requires_grad || w->requires_grad || b->requires_grad,
                  [x, w, b, p, osp](Node* out) {
                      return [x, w, b, p, osp, out]() {
                          const bool gx = x->requires_grad;
                          const bool gw = w->requires_grad;
                          const bool gb = b->requires_grad;
                          if (gx) x->ensure_grad();
                          if (gw) w->ensure_grad();
                          if (gb) b->ensure_grad();
                          for (int co = 0; co < p.cout; ++co) {
                              const double* dyc = out->grad.data() + co * osp;
                              if (gb) {
                                  double s = 0.0;
                                  for (long long i = 0; i < osp; ++i) s += dyc[i];
                                  b->grad[co] += s;
                              }
                              if (!gx && !gw) continue;
                              for (int ci = 0; ci < p.cin; ++ci) {
                                  const long long xoff =
                                      static_cast<long long>(ci) * p.di * p.hi * p.wi;
                                  const double* xc = x->val.data() + xoff;
                                  double* dxc = gx ? x->grad.data() + xoff : nullptr;
                                  const long long woff =
                                      ((static_cast<long long>(co) * p.cin + ci) * p.k) * p.k * p.k;
                                  for (int kd = 0; kd < p.k; ++kd) {
                                      int od0, od1;
                                      axis_range(p.di, p.do_, p.stride, p.pad, kd, od0, od1);
                                      for (int kh = 0; kh < p.k; ++kh) {
                                          int oh0, oh1;
                                          axis_range(p.hi, p.ho, p.stride, p.pad, kh, oh0, oh1);
                                          for (int kw = 0; kw < p.k; ++kw) {
                                              int ow0, ow1;
                                              axis_range(p.wi, p.wo, p.stride, p.pad, kw, ow0, ow1);
                                              const double wv = w->val[woff + (kd * p.k + kh) * p.k + kw];
                                              double wg = 0.0;
                                              for (int od = od0; od <= od1; ++od) {
                                                  const int id = od * p.stride - p.pad + kd;
                                                  for (int oh = oh0; oh <= oh1; ++oh) {
                                                      const int ih = oh * p.stride - p.pad + kh;
                                                      const long long xrow =
                                                          (static_cast<long long>(id) * p.hi + ih) *
                                                          p.wi;
                                                      const double* dyr =
                                                          dyc +
                                                          (static_cast<long long>(od) * p.ho + oh) *
                                                              p.wo;
                                                      for (int ow = ow0; ow <= ow1; ++ow) {
                                                          const int iw =
                                                              ow * p.stride - p.pad + kw;
                                                          const double gy = dyr[ow];
                                                          if (gx) dxc[xrow + iw] += wv * gy;
                                                          wg += xc[xrow + iw] * gy;
                                                      }
                                                  }
                                              }
                                              if (gw)
                                                  w->grad[woff + (kd * p.k + kh) * p.k + kw] += wg;
                                          }
                                      }
                                  }
                              }
                          }
                      };
                  });
}

// ---------------------------------------------------------------------------
// group norm
// ---------------------------------------------------------------------------

Var group_norm(Graph& g, const Var& x, const Var& gamma, const Var& beta, int group_size,
               double eps) {
    const Dims4 dx = dims4(x, "group_norm");
    require(gamma->shape == Shape{dx.c} && beta->shape == Shape{dx.c},
            "group_norm: gamma/beta must be {C}");
    int gs = std::min(group_size, dx.c);
    while (gs > 1 && dx.c % gs != 0) --gs;
    const int n_groups = dx.c / gs;
    const long long sp = dx.spatial();
    const long long ng = gs * sp;  // elements per group

    std::vector<double> mean(n_groups), inv_std(n_groups);
    std::vector<double> v(x->val.size());
    for (int grp = 0; grp < n_groups; ++grp) {
        const double* xg = x->val.data() + static_cast<long long>(grp) * ng;
        double m = 0.0;
        for (long long i = 0; i < ng; ++i) m += xg[i];
        m /= static_cast<double>(ng);
        double var = 0.0;
        for (long long i = 0; i < ng; ++i) var += (xg[i] - m) * (xg[i] - m);
        var /= static_cast<double>(ng);
        mean[grp] = m;
        inv_std[grp] = 1.0 / std::sqrt(var + eps);
    }
    for (int c = 0; c < dx.c; ++c) {
        const int grp = c / gs;
        const double m = mean[grp], is = inv_std[grp];
        const double ga = gamma->val[c], be = beta->val[c];
        for (long long i = 0; i < sp; ++i)
            v[c * sp + i] = ga * (x->val[c * sp + i] - m) * is + be;
    }

    auto saved_mean = std::make_shared<std::vector<double>>(std::move(mean));
    auto saved_inv = std::make_shared<std::vector<double>>(std::move(inv_std));
    return finish(
        g, x->shape, std::move(v),
        x->requires_grad || gamma->requires_grad || beta->requires_grad,
        [x, gamma, beta, gs, sp, ng, saved_mean, saved_inv](Node* out) {
            return [x, gamma, beta, gs, sp, ng, saved_mean, saved_inv, out]() {
                const int C = x->shape[0];
                const int n_groups = C / gs;
                if (gamma->requires_grad) gamma->ensure_grad();
                if (beta->requires_grad) beta->ensure_grad();
                if (x->requires_grad) x->ensure_grad();
                for (int grp = 0; grp < n_groups; ++grp) {
                    const double m = (*saved_mean)[grp], is = (*saved_inv)[grp];
                    double s1 = 0.0, s2 = 0.0;
                    for (int c = grp * gs; c < (grp + 1) * gs; ++c) {
                        const double ga = gamma->val[c];
                        double dgam = 0.0, dbet = 0.0;
                        for (long long i = 0; i < sp; ++i) {
                            const double xhat = (x->val[c * sp + i] - m) * is;
                            const double gy = out->grad[c * sp + i];
                            dgam += gy * xhat;
                            dbet += gy;
                            const double dxh = gy * ga;
                            s1 += dxh;
                            s2 += dxh * xhat;
                        }
                        if (gamma->requires_grad) gamma->grad[c] += dgam;
                        if (beta->requires_grad) beta->grad[c] += dbet;
                    }
                    if (!x->requires_grad) continue;
                    const double inv_ng = 1.0 / static_cast<double>(ng);
                    for (int c = grp * gs; c < (grp + 1) * gs; ++c) {
                        const double ga = gamma->val[c];
                        for (long long i = 0; i < sp; ++i) {
                            const double xhat = (x->val[c * sp + i] - m) * is;
                            const double dxh = out->grad[c * sp + i] * ga;
                            x->grad[c * sp + i] +=
                                is * (dxh - inv_ng * s1 - xhat * inv_ng * s2);
                        }
                    }
                }
            };
        });
}

// ---------------------------------------------------------------------------
// dense / matrix
// ---------------------------------------------------------------------------

Var linear(Graph& g, const Var& x, const Var& w, const Var& b) {
    require(x->shape.size() == 1, "linear: x must be a vector");
    require(w->shape.size() == 2 && w->shape[1] == x->shape[0], "linear: w must be {m, n}");
    const int m = w->shape[0], n = w->shape[1];
    require(b->shape == Shape{m}, "linear: bias must be {m}");
    std::vector<double> v(m);
    for (int i = 0; i < m; ++i) {
        double s = b->val[i];
        const double* wr = w->val.data() + static_cast<long long>(i) * n;
        for (int j = 0; j < n; ++j) s += wr[j] * x->val[j];
        v[i] = s;
    }
    return finish(g, {m}, std::move(v),
                  x->requires_grad || w->requires_grad || b->requires_grad,
                  [x, w, b, m, n](Node* out) {
                      return [x, w, b, m, n, out]() {
                          if (b->requires_grad) {
                              b->ensure_grad();
                              for (int i = 0; i < m; ++i) b->grad[i] += out->grad[i];
                          }
                          if (w->requires_grad) {
                              w->ensure_grad();
                              for (int i = 0; i < m; ++i) {
                                  double* wr = w->grad.data() + static_cast<long long>(i) * n;
                                  const double gy = out->grad[i];
                                  for (int j = 0; j < n; ++j) wr[j] += gy * x->val[j];
                              }
                          }
                          if (x->requires_grad) {
                              x->ensure_grad();
                              for (int i = 0; i < m; ++i) {
                                  const double* wr = w->val.data() + static_cast<long long>(i) * n;
                                  const double gy = out->grad[i];
                                  for (int j = 0; j < n; ++j) x->grad[j] += gy * wr[j];
                              }
                          }
                      };
                  });
}

namespace {

/// C(m x n) (+)= op(A) * op(B); raw row-major helper shared by matmul fwd/bwd.
void gemm(const double* a, int ra, int ca, bool ta, const double* b, int rb, int cb, bool tb,
          double* c, bool accumulate) {
    const int m = ta ? ca : ra;
    const int k = ta ? ra : ca;
    const int n = tb ? rb : cb;
    if (!accumulate) std::fill(c, c + static_cast<long long>(m) * n, 0.0);
    for (int i = 0; i < m; ++i)
        for (int l = 0; l < k; ++l) {
            const double av = ta ? a[static_cast<long long>(l) * ca + i]
                                 : a[static_cast<long long>(i) * ca + l];
            if (av == 0.0) continue;
            const double* br = tb ? nullptr : b + static_cast<long long>(l) * cb;
            double* cr = c + static_cast<long long>(i) * n;
            if (tb) {
                for (int j = 0; j < n; ++j) cr[j] += av * b[static_cast<long long>(j) * cb + l];
            } else {
                for (int j = 0; j < n; ++j) cr[j] += av * br[j];
            }
        }
}

}  // namespace

Var matmul(Graph& g, const Var& a, const Var& b, bool trans_a, bool trans_b) {
    require(a->shape.size() == 2 && b->shape.size() == 2, "matmul: operands must be matrices");
    const int ra = a->shape[0], ca = a->shape[1], rb = b->shape[0], cb = b->shape[1];
    const int m = trans_a ? ca : ra;
    const int k = trans_a ? ra : ca;
    const int k2 = trans_b ? cb : rb;
    const int n = trans_b ? rb : cb;
    require(k == k2, "matmul: inner dimensions differ");
    std::vector<double> v(static_cast<size_t>(m) * n);
    gemm(a->val.data(), ra, ca, trans_a, b->val.data(), rb, cb, trans_b, v.data(), false);
    return finish(
        g, {m, n}, std::move(v), a->requires_grad || b->requires_grad,
        [a, b, trans_a, trans_b, ra, ca, rb, cb, m, k, n](Node* out) {
            return [a, b, trans_a, trans_b, ra, ca, rb, cb, m, k, n, out]() {
                if (a->requires_grad) {
                    a->ensure_grad();
                    // d op(A) = dY * op(B)^T, shape {m, k}
                    std::vector<double> dopa(static_cast<size_t>(m) * k);
                    gemm(out->grad.data(), m, n, false, b->val.data(), rb, cb, !trans_b,
                         dopa.data(), false);
                    if (!trans_a) {
                        for (size_t i = 0; i < dopa.size(); ++i) a->grad[i] += dopa[i];
                    } else {
                        for (int i = 0; i < m; ++i)
                            for (int l = 0; l < k; ++l)
                                a->grad[static_cast<long long>(l) * ca + i] +=
                                    dopa[static_cast<long long>(i) * k + l];
                    }
                }
                if (b->requires_grad) {
                    b->ensure_grad();
                    // d op(B) = op(A)^T * dY, shape {k, n}
                    std::vector<double> dopb(static_cast<size_t>(k) * n);
                    gemm(a->val.data(), ra, ca, !trans_a, out->grad.data(), m, n, false,
                         dopb.data(), false);
                    if (!trans_b) {
                        for (size_t i = 0; i < dopb.size(); ++i) b->grad[i] += dopb[i];
                    } else {
                        for (int l = 0; l < k; ++l)
                            for (int j = 0; j < n; ++j)
                                b->grad[static_cast<long long>(j) * cb + l] +=
                                    dopb[static_cast<long long>(l) * n + j];
                    }
                }
            };
        });
}

Var softmax_rows(Graph& g, const Var& x) {
    require(x->shape.size() == 2, "softmax_rows: expected a matrix");
    const int m = x->shape[0], n = x->shape[1];
    std::vector<double> v(x->val.size());
    for (int i = 0; i < m; ++i) {
        const double* xr = x->val.data() + static_cast<long long>(i) * n;
        double* vr = v.data() + static_cast<long long>(i) * n;
        double mx = xr[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, xr[j]);
        double sum = 0.0;
        for (int j = 0; j < n; ++j) {
            vr[j] = std::exp(xr[j] - mx);
            sum += vr[j];
        }
        for (int j = 0; j < n; ++j) vr[j] /= sum;
    }
    return finish(g, x->shape, std::move(v), x->requires_grad, [x, m, n](Node* out) {
        return [x, m, n, out]() {
            x->ensure_grad();
            for (int i = 0; i < m; ++i) {
                const double* yr = out->val.data() + static_cast<long long>(i) * n;
                const double* gy = out->grad.data() + static_cast<long long>(i) * n;
                double dot = 0.0;
                for (int j = 0; j < n; ++j) dot += gy[j] * yr[j];
                double* gx = x->grad.data() + static_cast<long long>(i) * n;
                for (int j = 0; j < n; ++j) gx[j] += yr[j] * (gy[j] - dot);
            }
        };
    });
}

Var reverse_seq(Graph& g, const Var& x) {
    require(x->shape.size() == 2, "reverse_seq: x must be {C, N}");
    const int C = x->shape[0];
    const long long N = x->shape[1];
    std::vector<double> v(x->val.size());
    for (int c = 0; c < C; ++c)
        for (long long k = 0; k < N; ++k) v[c * N + k] = x->val[c * N + (N - 1 - k)];
    return finish(g, x->shape, std::move(v), x->requires_grad, [x, C, N](Node* out) {
        return [x, C, N, out]() {
            x->ensure_grad();
            for (int c = 0; c < C; ++c)
                for (long long k = 0; k < N; ++k)
                    x->grad[c * N + (N - 1 - k)] += out->grad[c * N + k];
        };
    });
}

// ---------------------------------------------------------------------------
// state-space scan
// ---------------------------------------------------------------------------

Var ssm_scan(Graph& g, const Var& x, const Var& a, const Var& b, const Var& c, const Var& d) {
    require(x->shape.size() == 2, "ssm_scan: x must be {C, N}");
    const int C = x->shape[0];
    const long long N = x->shape[1];
    require(a->shape.size() == 2 && a->shape[0] == C, "ssm_scan: a must be {C, S}");
    const int S = a->shape[1];
    require(same_shape(b->shape, a->shape) && same_shape(c->shape, a->shape),
            "ssm_scan: a, b, c must share shape {C, S}");
    require(d->shape == Shape{C}, "ssm_scan: d must be {C}");
    for (double av : a->val)
        if (!(std::fabs(av) < 1.0))
            throw ConfigError("ssm_scan: decay |a| must be < 1 for a stable scan");

    std::vector<double> v(x->val.size(), 0.0);
    auto hist = std::make_shared<std::vector<double>>(
        static_cast<size_t>(C) * S * N);  // h trajectories for backward
    for (int ch = 0; ch < C; ++ch) {
        const double* xr = x->val.data() + ch * N;
        double* yr = v.data() + ch * N;
        const double dv = d->val[ch];
        for (long long k = 0; k < N; ++k) yr[k] = dv * xr[k];
        for (int j = 0; j < S; ++j) {
            const double av = a->val[ch * S + j];
            const double bv = b->val[ch * S + j];
            const double cv = c->val[ch * S + j];
            double* hr = hist->data() + (static_cast<long long>(ch) * S + j) * N;
            double h = 0.0;
            for (long long k = 0; k < N; ++k) {
                h = av * h + bv * xr[k];
                hr[k] = h;
                yr[k] += cv * h;
            }
        }
    }

    return finish(
        g, x->shape, std::move(v),
        x->requires_grad || a->requires_grad || b->requires_grad || c->requires_grad ||
            d->requires_grad,
        [x, a, b, c, d, C, N, S, hist](Node* out) {
            return [x, a, b, c, d, C, N, S, hist, out]() {
                if (x->requires_grad) x->ensure_grad();
                if (a->requires_grad) a->ensure_grad();
                if (b->requires_grad) b->ensure_grad();
                if (c->requires_grad) c->ensure_grad();
                if (d->requires_grad) d->ensure_grad();
                for (int ch = 0; ch < C; ++ch) {
                    const double* xr = x->val.data() + ch * N;
                    const double* gy = out->grad.data() + ch * N;
                    if (d->requires_grad) {
                        double s = 0.0;
                        for (long long k = 0; k < N; ++k) s += gy[k] * xr[k];
                        d->grad[ch] += s;
                    }
                    if (x->requires_grad) {
                        const double dv = d->val[ch];
                        double* gx = x->grad.data() + ch * N;
                        for (long long k = 0; k < N; ++k) gx[k] += dv * gy[k];
                    }
                    for (int j = 0; j < S; ++j) {
                        const double av = a->val[ch * S + j];
                        const double bv = b->val[ch * S + j];
                        const double cv = c->val[ch * S + j];
                        const double* hr = hist->data() + (static_cast<long long>(ch) * S + j) * N;
                        double gh_next = 0.0;
                        double ga = 0.0, gb = 0.0, gc = 0.0;
                        double* gx = x->requires_grad ? x->grad.data() + ch * N : nullptr;
                        for (long long k = N - 1; k >= 0; --k) {
                            gc += gy[k] * hr[k];
                            const double gh = cv * gy[k] + av * gh_next;
                            gb += gh * xr[k];
                            if (k > 0) ga += gh * hr[k - 1];
                            if (gx) gx[k] += bv * gh;
                            gh_next = gh;
                        }
                        if (a->requires_grad) a->grad[ch * S + j] += ga;
                        if (b->requires_grad) b->grad[ch * S + j] += gb;
                        if (c->requires_grad) c->grad[ch * S + j] += gc;
                    }
                }
            };
        });
}

}  // namespace amdiff::nn
