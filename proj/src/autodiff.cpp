#include "maml/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

namespace maml::ad {

namespace {

struct ConvDims {
    int Ci, D, H, W;
    int Co, K, stride;
    int Do, Ho, Wo;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride) {
    if (x.rank() != 4) throw std::invalid_argument("conv3d: input must be rank 4");
    if (w.rank() != 5) throw std::invalid_argument("conv3d: weights must be rank 5");
    if (stride != 1 && stride != 2) throw std::invalid_argument("conv3d: stride must be 1 or 2");
    ConvDims d;
    d.Ci = x.dim(0);
    d.D = x.dim(1);
    d.H = x.dim(2);
    d.W = x.dim(3);
    d.Co = w.dim(0);
    d.K = w.dim(2);
    if (w.dim(1) != d.Ci)
        throw std::invalid_argument("conv3d: weight input channels " + std::to_string(w.dim(1)) +
                                    " != input channels " + std::to_string(d.Ci));
    if (w.dim(3) != d.K || w.dim(4) != d.K || (d.K != 1 && d.K != 3))
        throw std::invalid_argument("conv3d: kernel must be cubic, size 1 or 3");
    const int P = d.K / 2;
    d.stride = stride;
    d.Do = (d.D + 2 * P - d.K) / stride + 1;
    d.Ho = (d.H + 2 * P - d.K) / stride + 1;
    d.Wo = (d.W + 2 * P - d.K) / stride + 1;
    if (d.Do < 1 || d.Ho < 1 || d.Wo < 1)
        throw std::invalid_argument("conv3d: output would be empty");
    return d;
}

void conv3d_fwd(const double* in, const double* w, const double* b, const ConvDims& d,
                double* out) {
    const int P = d.K / 2;
    const size_t in_ch = static_cast<size_t>(d.D) * d.H * d.W;
    const size_t out_ch = static_cast<size_t>(d.Do) * d.Ho * d.Wo;
    const size_t wk = static_cast<size_t>(d.K) * d.K * d.K;
    for (int co = 0; co < d.Co; ++co) {
        double* oc = out + co * out_ch;
        std::fill(oc, oc + out_ch, b ? b[co] : 0.0);
        for (int ci = 0; ci < d.Ci; ++ci) {
            const double* icp = in + ci * in_ch;
            const double* wc = w + (static_cast<size_t>(co) * d.Ci + ci) * wk;
            for (int oz = 0; oz < d.Do; ++oz) {
                for (int kz = 0; kz < d.K; ++kz) {
                    const int iz = oz * d.stride + kz - P;
                    if (iz < 0 || iz >= d.D) continue;
                    for (int oy = 0; oy < d.Ho; ++oy) {
                        double* orow = oc + (static_cast<size_t>(oz) * d.Ho + oy) * d.Wo;
                        for (int ky = 0; ky < d.K; ++ky) {
                            const int iy = oy * d.stride + ky - P;
                            if (iy < 0 || iy >= d.H) continue;
                            const double* irow = icp + (static_cast<size_t>(iz) * d.H + iy) * d.W;
                            const double* wr = wc + (static_cast<size_t>(kz) * d.K + ky) * d.K;
                            for (int kx = 0; kx < d.K; ++kx) {
                                const int off = kx - P;
                                const double wv = wr[kx];
                                if (d.stride == 1) {
                                    const int lo = off < 0 ? -off : 0;
                                    const int hi = std::min(d.Wo, d.W - off);
                                    const double* ir = irow + off;
                                    for (int ox = lo; ox < hi; ++ox) orow[ox] += wv * ir[ox];
                                } else {
                                    const int lo = off < 0 ? (-off + d.stride - 1) / d.stride : 0;
                                    const int hi =
                                        std::max(0, std::min(d.Wo, (d.W - 1 - off) / d.stride + 1));
                                    for (int ox = lo; ox < hi; ++ox)
                                        orow[ox] += wv * irow[ox * d.stride + off];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

// Accumulates into gin.
void conv3d_bwd_input(const double* gout, const double* w, const ConvDims& d, double* gin) {
    const int P = d.K / 2;
    const size_t in_ch = static_cast<size_t>(d.D) * d.H * d.W;
    const size_t out_ch = static_cast<size_t>(d.Do) * d.Ho * d.Wo;
    const size_t wk = static_cast<size_t>(d.K) * d.K * d.K;
    if (d.stride == 1) {
        for (int ci = 0; ci < d.Ci; ++ci) {
            double* gic = gin + ci * in_ch;
            for (int co = 0; co < d.Co; ++co) {
                const double* goc = gout + co * out_ch;
                const double* wc = w + (static_cast<size_t>(co) * d.Ci + ci) * wk;
                for (int iz = 0; iz < d.D; ++iz) {
                    for (int kz = 0; kz < d.K; ++kz) {
                        const int oz = iz + P - kz;
                        if (oz < 0 || oz >= d.Do) continue;
                        for (int iy = 0; iy < d.H; ++iy) {
                            double* grow = gic + (static_cast<size_t>(iz) * d.H + iy) * d.W;
                            for (int ky = 0; ky < d.K; ++ky) {
                                const int oy = iy + P - ky;
                                if (oy < 0 || oy >= d.Ho) continue;
                                const double* gorow =
                                    goc + (static_cast<size_t>(oz) * d.Ho + oy) * d.Wo;
                                const double* wr = wc + (static_cast<size_t>(kz) * d.K + ky) * d.K;
                                for (int kx = 0; kx < d.K; ++kx) {
                                    const int off = P - kx;  // ox = ix + off
                                    const int lo = off < 0 ? -off : 0;
                                    const int hi = std::min(d.W, d.Wo - off);
                                    const double wv = wr[kx];
                                    const double* gr = gorow + off;
                                    for (int ix = lo; ix < hi; ++ix) grow[ix] += wv * gr[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    } else {
        for (int ci = 0; ci < d.Ci; ++ci) {
            double* gic = gin + ci * in_ch;
            for (int co = 0; co < d.Co; ++co) {
                const double* goc = gout + co * out_ch;
                const double* wc = w + (static_cast<size_t>(co) * d.Ci + ci) * wk;
                for (int oz = 0; oz < d.Do; ++oz) {
                    for (int kz = 0; kz < d.K; ++kz) {
                        const int iz = oz * d.stride + kz - P;
                        if (iz < 0 || iz >= d.D) continue;
                        for (int oy = 0; oy < d.Ho; ++oy) {
                            const double* gorow = goc + (static_cast<size_t>(oz) * d.Ho + oy) * d.Wo;
                            for (int ky = 0; ky < d.K; ++ky) {
                                const int iy = oy * d.stride + ky - P;
                                if (iy < 0 || iy >= d.H) continue;
                                double* grow = gic + (static_cast<size_t>(iz) * d.H + iy) * d.W;
                                const double* wr = wc + (static_cast<size_t>(kz) * d.K + ky) * d.K;
                                for (int kx = 0; kx < d.K; ++kx) {
                                    const int off = kx - P;
                                    const int lo = off < 0 ? (-off + d.stride - 1) / d.stride : 0;
                                    const int hi =
                                        std::max(0, std::min(d.Wo, (d.W - 1 - off) / d.stride + 1));
                                    const double wv = wr[kx];
                                    for (int ox = lo; ox < hi; ++ox)
                                        grow[ox * d.stride + off] += wv * gorow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

// Accumulates into gw and gb (gb may be null).
void conv3d_bwd_weights(const double* gout, const double* in, const ConvDims& d, double* gw,
                        double* gb) {
    const int P = d.K / 2;
    const size_t in_ch = static_cast<size_t>(d.D) * d.H * d.W;
    const size_t out_ch = static_cast<size_t>(d.Do) * d.Ho * d.Wo;
    const size_t wk = static_cast<size_t>(d.K) * d.K * d.K;
    std::vector<double> acc(static_cast<size_t>(d.Ci) * wk);
    for (int co = 0; co < d.Co; ++co) {
        const double* goc = gout + co * out_ch;
        if (gb) {
            double bacc = 0.0;
            for (size_t i = 0; i < out_ch; ++i) bacc += goc[i];
            gb[co] += bacc;
        }
        std::fill(acc.begin(), acc.end(), 0.0);
        for (int oz = 0; oz < d.Do; ++oz) {
            for (int oy = 0; oy < d.Ho; ++oy) {
                const double* gorow = goc + (static_cast<size_t>(oz) * d.Ho + oy) * d.Wo;
                for (int ci = 0; ci < d.Ci; ++ci) {
                    const double* icp = in + ci * in_ch;
                    for (int kz = 0; kz < d.K; ++kz) {
                        const int iz = oz * d.stride + kz - P;
                        if (iz < 0 || iz >= d.D) continue;
                        for (int ky = 0; ky < d.K; ++ky) {
                            const int iy = oy * d.stride + ky - P;
                            if (iy < 0 || iy >= d.H) continue;
                            const double* irow = icp + (static_cast<size_t>(iz) * d.H + iy) * d.W;
                            double* ar = &acc[(static_cast<size_t>(ci) * d.K * d.K + kz * d.K + ky) *
                                              d.K];
                            for (int kx = 0; kx < d.K; ++kx) {
                                const int off = kx - P;
                                double s = 0.0;
                                if (d.stride == 1) {
                                    const int lo = off < 0 ? -off : 0;
                                    const int hi = std::min(d.Wo, d.W - off);
                                    const double* ir = irow + off;
                                    for (int ox = lo; ox < hi; ++ox) s += gorow[ox] * ir[ox];
                                } else {
                                    const int lo = off < 0 ? (-off + d.stride - 1) / d.stride : 0;
                                    const int hi =
                                        std::max(0, std::min(d.Wo, (d.W - 1 - off) / d.stride + 1));
                                    for (int ox = lo; ox < hi; ++ox)
                                        s += gorow[ox] * irow[ox * d.stride + off];
                                }
                                ar[kx] += s;
                            }
                        }
                    }
                }
            }
        }
        double* gwc = gw + co * static_cast<size_t>(d.Ci) * wk;
        for (size_t i = 0; i < acc.size(); ++i) gwc[i] += acc[i];
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(what) + ": shape mismatch " +
                                    Tensor::shape_str(a.shape()) + " vs " +
                                    Tensor::shape_str(b.shape()));
}

Tape& tape_of(Value v) {
    if (!v.valid()) throw std::logic_error("invalid Value handle");
    return *v.tape;
}

}  // namespace

Value Tape::leaf(Tensor v, bool requires_grad) { return emit(std::move(v), requires_grad); }

Value Tape::emit(Tensor value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad && grad_enabled_, {}});
    return Value{this, static_cast<int>(nodes_.size()) - 1};
}

Tensor& Tape::grad(Value v) {
    Node& n = nodes_[static_cast<size_t>(v.id)];
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return n.grad;
}

void Tape::backward(Value root) {
    if (!grad_enabled_) throw std::logic_error("Tape::backward: gradients are disabled");
    if (val(root).numel() != 1) throw std::logic_error("Tape::backward: root must be scalar");
    grad(root)[0] = 1.0;
    for (int id = root.id; id >= 0; --id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.back || n.grad.empty()) continue;
        n.back(*this);
    }
}

Value constant(Tape& t, Tensor v) { return t.leaf(std::move(v), false); }

Value scalar_const(Tape& t, double v) { return t.leaf(Tensor::scalar(v), false); }

Value conv3d(Value x, Value w, Value b, int stride) {
    Tape& t = tape_of(x);
    const Tensor& xv = t.val(x);
    const Tensor& wv = t.val(w);
    const Tensor& bv = t.val(b);
    const ConvDims d = conv_dims(xv, wv, stride);
    if (static_cast<int>(bv.numel()) != d.Co)
        throw std::invalid_argument("conv3d: bias size != output channels");
    Tensor out({d.Co, d.Do, d.Ho, d.Wo});
    conv3d_fwd(xv.data(), wv.data(), bv.data(), d, out.data());
    const bool rec =
        t.grad_enabled() && (t.requires_grad(x) || t.requires_grad(w) || t.requires_grad(b));
    Value y = t.emit(std::move(out), rec);
    if (rec) {
        const int xid = x.id, wid = w.id, bid = b.id, yid = y.id;
        t.node(y.id).back = [xid, wid, bid, yid, d](Tape& tp) {
            const Tensor& g = tp.node(yid).grad;
            Value xh{&tp, xid}, wh{&tp, wid}, bh{&tp, bid};
            if (tp.requires_grad(xh))
                conv3d_bwd_input(g.data(), tp.node(wid).value.data(), d, tp.grad(xh).data());
            if (tp.requires_grad(wh) || tp.requires_grad(bh)) {
                double* gb = tp.requires_grad(bh) ? tp.grad(bh).data() : nullptr;
                // weight grads always needed together with bias here
                conv3d_bwd_weights(g.data(), tp.node(xid).value.data(), d,
                                   tp.requires_grad(wh) ? tp.grad(wh).data() : nullptr, gb);
            }
        };
    }
    return y;
}

Value upsample_nearest2(Value x) {
    Tape& t = tape_of(x);
    const Tensor& xv = t.val(x);
    if (xv.rank() != 4) throw std::invalid_argument("upsample_nearest2: rank 4 required");
    Tensor out = eval_upsample_nearest2(xv);
    const bool rec = t.grad_enabled() && t.requires_grad(x);
    Value y = t.emit(std::move(out), rec);
    if (rec) {
        const int xid = x.id, yid = y.id;
        t.node(y.id).back = [xid, yid](Tape& tp) {
            const Tensor& g = tp.node(yid).grad;
            Tensor& gx = tp.grad(Value{&tp, xid});
            const int C = gx.dim(0), D = gx.dim(1), H = gx.dim(2), W = gx.dim(3);
            for (int c = 0; c < C; ++c)
                for (int iz = 0; iz < D; ++iz)
                    for (int iy = 0; iy < H; ++iy)
                        for (int ix = 0; ix < W; ++ix) {
                            double s = 0.0;
                            for (int dz = 0; dz < 2; ++dz)
                                for (int dy = 0; dy < 2; ++dy)
                                    for (int dx = 0; dx < 2; ++dx)
                                        s += g.at(c, 2 * iz + dz, 2 * iy + dy, 2 * ix + dx);
                            gx.at(c, iz, iy, ix) += s;
                        }
        };
    }
    return y;
}

Tensor eval_upsample_nearest2(const Tensor& x) {
    const int C = x.dim(0), D = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor out({C, 2 * D, 2 * H, 2 * W});
    for (int c = 0; c < C; ++c)
        for (int z = 0; z < 2 * D; ++z)
            for (int y = 0; y < 2 * H; ++y) {
                const int iz = z / 2, iy = y / 2;
                for (int xq = 0; xq < 2 * W; ++xq) out.at(c, z, y, xq) = x.at(c, iz, iy, xq / 2);
            }
    return out;
}

Value concat_channels(const std::vector<Value>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_channels: empty input list");
    Tape& t = tape_of(xs[0]);
    int C = 0;
    const Tensor& first = t.val(xs[0]);
    if (first.rank() != 4) throw std::invalid_argument("concat_channels: rank 4 required");
    for (const Value& v : xs) {
        const Tensor& tv = t.val(v);
        if (tv.rank() != 4 || tv.dim(1) != first.dim(1) || tv.dim(2) != first.dim(2) ||
            tv.dim(3) != first.dim(3))
            throw std::invalid_argument("concat_channels: spatial shape mismatch");
        C += tv.dim(0);
    }
    Tensor out({C, first.dim(1), first.dim(2), first.dim(3)});
    const size_t sp = first.spatial();
    size_t off = 0;
    bool rec = false;
    for (const Value& v : xs) {
        const Tensor& tv = t.val(v);
        std::copy(tv.data(), tv.data() + tv.numel(), out.data() + off);
        off += tv.numel();
        rec = rec || t.requires_grad(v);
    }
    rec = rec && t.grad_enabled();
    Value y = t.emit(std::move(out), rec);
    if (rec) {
        std::vector<int> ids;
        for (const Value& v : xs) ids.push_back(v.id);
        const int yid = y.id;
        t.node(y.id).back = [ids, yid, sp](Tape& tp) {
            const Tensor& g = tp.node(yid).grad;
            size_t off2 = 0;
            for (int id : ids) {
                Value h{&tp, id};
                const size_t n = tp.node(id).value.numel();
                if (tp.requires_grad(h)) {
                    Tensor& gx = tp.grad(h);
                    const double* gs = g.data() + off2;
                    for (size_t i = 0; i < n; ++i) gx[i] += gs[i];
                }
                off2 += n;
            }
            (void)sp;
        };
    }
    return y;
}

Value instance_norm(Value x, double eps) {
    Tape& t = tape_of(x);
    const Tensor& xv = t.val(x);
    if (xv.rank() != 4) throw std::invalid_argument("instance_norm: rank 4 required");
    const int C = xv.dim(0);
    const size_t S = xv.spatial();
    if (S < 2) throw std::invalid_argument("instance_norm: spatial size must be > 1");
    Tensor out(xv.shape());
    std::vector<double> inv(C);
    for (int c = 0; c < C; ++c) {
        const double* xc = xv.data() + c * S;
        double mu = 0.0;
        for (size_t i = 0; i < S; ++i) mu += xc[i];
        mu /= static_cast<double>(S);
        double var = 0.0;
        for (size_t i = 0; i < S; ++i) {
            const double dv = xc[i] - mu;
            var += dv * dv;
        }
        var /= static_cast<double>(S);
        const double iv = 1.0 / std::sqrt(var + eps);
        inv[c] = iv;
        double* oc = out.data() + c * S;
        for (size_t i = 0; i < S; ++i) oc[i] = (xc[i] - mu) * iv;
    }
    const bool rec = t.grad_enabled() && t.requires_grad(x);
    Value y = t.emit(std::move(out), rec);
    if (rec) {
        const int xid = x.id, yid = y.id;
        t.node(y.id).back = [xid, yid, inv, C, S](Tape& tp) {
            const Tensor& g = tp.node(yid).grad;
            const Tensor& yv = tp.node(yid).value;
            Tensor& gx = tp.grad(Value{&tp, xid});
            for (int c = 0; c < C; ++c) {
                const double* gc = g.data() + c * S;
                const double* yc = yv.data() + c * S;
                double gmean = 0.0, gymean = 0.0;
                for (size_t i = 0; i < S; ++i) {
                    gmean += gc[i];
                    gymean += gc[i] * yc[i];
                }
                gmean /= static_cast<double>(S);
                gymean /= static_cast<double>(S);
                double* gxc = gx.data() + c * S;
                const double iv = inv[c];
                for (size_t i = 0; i < S; ++i)
                    gxc[i] += iv * (gc[i] - gmean - yc[i] * gymean);
            }
        };
    }
    return y;
}

Value leaky_relu(Value x, double slope) {
    Tape& t = tape_of(x);
    const Tensor& xv = t.val(x);
    Tensor out(xv.shape());
    for (size_t i = 0; i < xv.numel(); ++i) out[i] = xv[i] >= 0.0 ? xv[i] : slope * xv[i];
    const bool rec = t.grad_enabled() && t.requires_grad(x);
    Value y = t.emit(std::move(out), rec);
    if (rec) {
        const int xid = x.id, yid = y.id;
        t.node(y.id).back = [xid, yid, slope](Tape& tp) {
            const Tensor& g = tp.node(yid).grad;
            const Tensor& xv2 = tp.node(xid).value;
            Tensor& gx = tp.grad(Value{&tp, xid});
            for (size_t i = 0; i < g.numel(); ++i)
                gx[i] += (xv2[i] >= 0.0 ? 1.0 : slope) * g[i];
        };
    }
    return y;
}

Value sigmoid(Value x) {
    Tape& t = tape_of(x);
    const Tensor& xv = t.val(x);
    Tensor out(xv.shape());
    for (size_t i = 0; i < xv.numel(); ++i) out[i] = 1.0 / (1.0 + std::exp(-xv[i]));
    const bool rec = t.grad_enabled() && t.requires_grad(x);
    Value y = t.emit(std::move(out), rec);
    if (rec) {
        const int xid = x.id, yid = y.id;
        t.node(y.id).back = [xid, yid](Tape& tp) {
            const Tensor& g = tp.node(yid).grad;
            const Tensor& yv = tp.node(yid).value;
            Tensor& gx = tp.grad(Value{&tp, xid});
            for (size_t i = 0; i < g.numel(); ++i) gx[i] += yv[i] * (1.0 - yv[i]) * g[i];
        };
    }
    return y;
}

Value softmax_channels(Value x) {
    Tape& t = tape_of(x);
    const Tensor& xv = t.val(x);
    if (xv.rank() != 4) throw std::invalid_argument("softmax_channels: rank 4 required");
    Tensor out = eval_softmax_channels(xv);
    const bool rec = t.grad_enabled() && t.requires_grad(x);
    Value y = t.emit(std::move(out), rec);
    if (rec) {
        const int xid = x.id, yid = y.id;
        t.node(y.id).back = [xid, yid](Tape& tp) {
            const Tensor& g = tp.node(yid).grad;
            const Tensor& p = tp.node(yid).value;
            Tensor& gx = tp.grad(Value{&tp, xid});
            const int K = p.dim(0);
            const size_t S = p.spatial();
            for (size_t i = 0; i < S; ++i) {
                double dot = 0.0;
                for (int k = 0; k < K; ++k) dot += g[k * S + i] * p[k * S + i];
                for (int k = 0; k < K; ++k)
                    gx[k * S + i] += p[k * S + i] * (g[k * S + i] - dot);
            }
        };
    }
    return y;
}

Value broadcast_mul(Value att, Value feat) {
    Tape& t = tape_of(att);
    const Tensor& av = t.val(att);
    const Tensor& fv = t.val(feat);
    if (av.rank() != 4 || av.dim(0) != 1)
        throw std::invalid_argument("broadcast_mul: attention must be (1,D,H,W)");
    if (fv.rank() != 4 || fv.dim(1) != av.dim(1) || fv.dim(2) != av.dim(2) ||
        fv.dim(3) != av.dim(3))
        throw std::invalid_argument("broadcast_mul: spatial shape mismatch");
    const int C = fv.dim(0);
    const size_t S = fv.spatial();
    Tensor out(fv.shape());
    for (int c = 0; c < C; ++c) {
        const double* fc = fv.data() + c * S;
        double* oc = out.data() + c * S;
        for (size_t i = 0; i < S; ++i) oc[i] = av[i] * fc[i];
    }
    const bool rec = t.grad_enabled() && (t.requires_grad(att) || t.requires_grad(feat));
    Value y = t.emit(std::move(out), rec);
    if (rec) {
        const int aid = att.id, fid = feat.id, yid = y.id;
        t.node(y.id).back = [aid, fid, yid, C, S](Tape& tp) {
            const Tensor& g = tp.node(yid).grad;
            const Tensor& av2 = tp.node(aid).value;
            const Tensor& fv2 = tp.node(fid).value;
            Value ah{&tp, aid}, fh{&tp, fid};
            if (tp.requires_grad(ah)) {
                Tensor& ga = tp.grad(ah);
                for (int c = 0; c < C; ++c) {
                    const double* gc = g.data() + c * S;
                    const double* fc = fv2.data() + c * S;
                    for (size_t i = 0; i < S; ++i) ga[i] += gc[i] * fc[i];
                }
            }
            if (tp.requires_grad(fh)) {
                Tensor& gf = tp.grad(fh);
                for (int c = 0; c < C; ++c) {
                    const double* gc = g.data() + c * S;
                    double* gfc = gf.data() + c * S;
                    for (size_t i = 0; i < S; ++i) gfc[i] += gc[i] * av2[i];
                }
            }
        };
    }
    return y;
}

namespace {

template <typename Fwd, typename Bwd>
Value binary_op(Value a, Value b, const char* name, Fwd fwd, Bwd bwd) {
    Tape& t = tape_of(a);
    const Tensor& av = t.val(a);
    const Tensor& bv = t.val(b);
    require_same_shape(av, bv, name);
    Tensor out(av.shape());
    for (size_t i = 0; i < av.numel(); ++i) out[i] = fwd(av[i], bv[i]);
    const bool rec = t.grad_enabled() && (t.requires_grad(a) || t.requires_grad(b));
    Value y = t.emit(std::move(out), rec);
    if (rec) {
        const int aid = a.id, bid = b.id, yid = y.id;
        t.node(y.id).back = [aid, bid, yid, bwd](Tape& tp) {
            const Tensor& g = tp.node(yid).grad;
            const Tensor& av2 = tp.node(aid).value;
            const Tensor& bv2 = tp.node(bid).value;
            Value ah{&tp, aid}, bh{&tp, bid};
            const bool na = tp.requires_grad(ah), nb = tp.requires_grad(bh);
            Tensor* ga = na ? &tp.grad(ah) : nullptr;
            Tensor* gb = nb ? &tp.grad(bh) : nullptr;
            for (size_t i = 0; i < g.numel(); ++i) {
                auto [da, db] = bwd(av2[i], bv2[i], g[i]);
                if (ga) (*ga)[i] += da;
                if (gb) (*gb)[i] += db;
            }
        };
    }
    return y;
}

}  // namespace

Value add(Value a, Value b) {
    return binary_op(
        a, b, "add", [](double x, double y) { return x + y; },
        [](double, double, double g) { return std::pair<double, double>{g, g}; });
}

Value sub(Value a, Value b) {
    return binary_op(
        a, b, "sub", [](double x, double y) { return x - y; },
        [](double, double, double g) { return std::pair<double, double>{g, -g}; });
}

Value mul(Value a, Value b) {
    return binary_op(
        a, b, "mul", [](double x, double y) { return x * y; },
        [](double x, double y, double g) { return std::pair<double, double>{g * y, g * x}; });
}

Value div(Value a, Value b) {
    return binary_op(
        a, b, "div", [](double x, double y) { return x / y; },
        [](double x, double y, double g) {
            return std::pair<double, double>{g / y, -g * x / (y * y)};
        });
}

Value affine(Value x, double scale, double shift) {
    Tape& t = tape_of(x);
    const Tensor& xv = t.val(x);
    Tensor out(xv.shape());
    for (size_t i = 0; i < xv.numel(); ++i) out[i] = scale * xv[i] + shift;
    const bool rec = t.grad_enabled() && t.requires_grad(x);
    Value y = t.emit(std::move(out), rec);
    if (rec) {
        const int xid = x.id, yid = y.id;
        t.node(y.id).back = [xid, yid, scale](Tape& tp) {
            const Tensor& g = tp.node(yid).grad;
            Tensor& gx = tp.grad(Value{&tp, xid});
            for (size_t i = 0; i < g.numel(); ++i) gx[i] += scale * g[i];
        };
    }
    return y;
}

Value select_channel(Value x, int c) {
    Tape& t = tape_of(x);
    const Tensor& xv = t.val(x);
    if (xv.rank() != 4 || c < 0 || c >= xv.dim(0))
        throw std::invalid_argument("select_channel: bad channel index");
    const size_t S = xv.spatial();
    Tensor out({xv.dim(1), xv.dim(2), xv.dim(3)});
    std::copy(xv.data() + c * S, xv.data() + (c + 1) * S, out.data());
    const bool rec = t.grad_enabled() && t.requires_grad(x);
    Value y = t.emit(std::move(out), rec);
    if (rec) {
        const int xid = x.id, yid = y.id;
        t.node(y.id).back = [xid, yid, c, S](Tape& tp) {
            const Tensor& g = tp.node(yid).grad;
            Tensor& gx = tp.grad(Value{&tp, xid});
            double* gc = gx.data() + c * S;
            for (size_t i = 0; i < S; ++i) gc[i] += g[i];
        };
    }
    return y;
}

Value sum_all(Value x) {
    Tape& t = tape_of(x);
    const Tensor& xv = t.val(x);
    double s = 0.0;
    for (size_t i = 0; i < xv.numel(); ++i) s += xv[i];
    const bool rec = t.grad_enabled() && t.requires_grad(x);
    Value y = t.emit(Tensor::scalar(s), rec);
    if (rec) {
        const int xid = x.id, yid = y.id;
        t.node(y.id).back = [xid, yid](Tape& tp) {
            const double g = tp.node(yid).grad[0];
            Tensor& gx = tp.grad(Value{&tp, xid});
            for (size_t i = 0; i < gx.numel(); ++i) gx[i] += g;
        };
    }
    return y;
}

Value dot_const(Value x, Tensor weights) {
    Tape& t = tape_of(x);
    const Tensor& xv = t.val(x);
    if (xv.numel() != weights.numel())
        throw std::invalid_argument("dot_const: size mismatch");
    double s = 0.0;
    for (size_t i = 0; i < xv.numel(); ++i) s += xv[i] * weights[i];
    const bool rec = t.grad_enabled() && t.requires_grad(x);
    Value y = t.emit(Tensor::scalar(s), rec);
    if (rec) {
        auto wts = std::make_shared<Tensor>(std::move(weights));
        const int xid = x.id, yid = y.id;
        t.node(y.id).back = [xid, yid, wts](Tape& tp) {
            const double g = tp.node(yid).grad[0];
            Tensor& gx = tp.grad(Value{&tp, xid});
            for (size_t i = 0; i < gx.numel(); ++i) gx[i] += g * (*wts)[i];
        };
    }
    return y;
}

Value log_clamped(Value x, double floor_value) {
    Tape& t = tape_of(x);
    const Tensor& xv = t.val(x);
    Tensor out(xv.shape());
    for (size_t i = 0; i < xv.numel(); ++i) out[i] = std::log(std::max(xv[i], floor_value));
    const bool rec = t.grad_enabled() && t.requires_grad(x);
    Value y = t.emit(std::move(out), rec);
    if (rec) {
        const int xid = x.id, yid = y.id;
        t.node(y.id).back = [xid, yid, floor_value](Tape& tp) {
            const Tensor& g = tp.node(yid).grad;
            const Tensor& xv2 = tp.node(xid).value;
            Tensor& gx = tp.grad(Value{&tp, xid});
            for (size_t i = 0; i < g.numel(); ++i)
                if (xv2[i] > floor_value) gx[i] += g[i] / xv2[i];
        };
    }
    return y;
}

// --- eager helpers -----------------------------------------------------------

Tensor eval_conv3d(const Tensor& x, const Tensor& w, const Tensor& b, int stride) {
    const ConvDims d = conv_dims(x, w, stride);
    if (static_cast<int>(b.numel()) != d.Co)
        throw std::invalid_argument("conv3d: bias size != output channels");
    Tensor out({d.Co, d.Do, d.Ho, d.Wo});
    conv3d_fwd(x.data(), w.data(), b.data(), d, out.data());
    return out;
}

Tensor eval_instance_norm(const Tensor& x, double eps) {
    Tape t(false);
    return t.val(instance_norm(t.leaf(x, false), eps));
}

Tensor eval_leaky_relu(const Tensor& x, double slope) {
    Tensor out(x.shape());
    for (size_t i = 0; i < x.numel(); ++i) out[i] = x[i] >= 0.0 ? x[i] : slope * x[i];
    return out;
}

Tensor eval_sigmoid(const Tensor& x) {
    Tensor out(x.shape());
    for (size_t i = 0; i < x.numel(); ++i) out[i] = 1.0 / (1.0 + std::exp(-x[i]));
    return out;
}

Tensor eval_softmax_channels(const Tensor& x) {
    const int K = x.dim(0);
    const size_t S = x.spatial();
    Tensor out(x.shape());
    for (size_t i = 0; i < S; ++i) {
        double m = x[i];
        for (int k = 1; k < K; ++k) m = std::max(m, x[k * S + i]);
        double z = 0.0;
        for (int k = 0; k < K; ++k) z += std::exp(x[k * S + i] - m);
        for (int k = 0; k < K; ++k) out[k * S + i] = std::exp(x[k * S + i] - m) / z;
    }
    return out;
}

}  // namespace maml::ad
