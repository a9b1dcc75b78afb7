#include "ctd/attention.hpp"

#include <cmath>

#include "ctd/error.hpp"

namespace ctd::attn {

void SasBlock::init(nn::ParamRegistry& reg, const std::string& name,
                    const SasConfig& cfg, Rng& rng) {
    check(cfg.channels % cfg.heads == 0, Error::Kind::config,
          "channels must be divisible by head count");
    cfg_ = cfg;
    const int c = cfg.channels, mk = cfg.heads * cfg.points;
    reg.add(wx, name + ".off_x.weight", Tensor({mk, c}));
    reg.add(bx, name + ".off_x.bias", Tensor({mk}));
    reg.add(wy, name + ".off_y.weight", Tensor({mk, c}));
    reg.add(by, name + ".off_y.bias", Tensor({mk}));
    reg.add(watt, name + ".att.weight", nn::init_tensor({mk, c}, nn::Init::kaiming, c, rng));
    reg.add(batt, name + ".att.bias", Tensor({mk}));
    reg.add(wvalue, name + ".value.weight",
            nn::init_tensor({c, c}, nn::Init::kaiming, c, rng));
    reg.add(bvalue, name + ".value.bias", Tensor({c}));
    reg.add(wproj, name + ".proj.weight", Tensor({c, c}));
    reg.add(bproj, name + ".proj.bias", Tensor({c}));
    reg.add(mlp_w1, name + ".mlp.fc1.weight",
            nn::init_tensor({4 * c, c}, nn::Init::kaiming, c, rng));
    reg.add(mlp_b1, name + ".mlp.fc1.bias", Tensor({4 * c}));
    reg.add(mlp_w2, name + ".mlp.fc2.weight", Tensor({c, 4 * c}));
    reg.add(mlp_b2, name + ".mlp.fc2.bias", Tensor({c}));
    if (cfg.encoding == EncodingKind::rpe)
        reg.add(rpe_bias, name + ".rpe_bias", Tensor({cfg.heads, cfg.points}));
    if (cfg.encoding == EncodingKind::spe) {
        has_spe_ = true;
        spe_.init(reg, name + ".spe", c, cfg.spe_stn, cfg.spe_side, rng);
    }
}

Tensor SasBlock::encoding_for(int height, int width,
                              enc::SymmetricEncoding::Cache* spe_cache) const {
    Tensor p = enc::sinusoidal_encoding(height, width, cfg_.channels);
    if (cfg_.encoding == EncodingKind::ape) return p;
    return spe_.forward(p, spe_cache);
}

Tensor SasBlock::recalibrated(const Tensor& level) const {
    if (cfg_.encoding == EncodingKind::none || cfg_.encoding == EncodingKind::rpe)
        return level;
    return enc::recalibrate(level, encoding_for(level.dim(1), level.dim(2), nullptr));
}

namespace {

// y[mk,n] = w[mk,c] * x[c,n] + b
Tensor project(const nn::Param& w, const nn::Param& b, const Tensor& x_mat) {
    const int rows = w.value.dim(0), cols = x_mat.dim(1);
    Tensor y({rows, cols});
    gemm_nn(w.value.data(), x_mat.data(), y.data(), rows, w.value.dim(1), cols);
    for (int r = 0; r < rows; ++r) {
        double bias = b.value[r];
        double* row = y.data() + static_cast<size_t>(r) * cols;
        for (int i = 0; i < cols; ++i) row[i] += bias;
    }
    return y;
}

void project_backward(const nn::Param& w, const nn::Param& b, const Tensor& x_mat,
                      const Tensor& dy, nn::Grads& grads, Tensor& dx_accum) {
    const int rows = w.value.dim(0), inner = w.value.dim(1), cols = x_mat.dim(1);
    gemm_nt(dy.data(), x_mat.data(), grads.of(w).data(), rows, cols, inner, true);
    Tensor& db = grads.of(b);
    for (int r = 0; r < rows; ++r) {
        const double* row = dy.data() + static_cast<size_t>(r) * cols;
        double s = 0.0;
        for (int i = 0; i < cols; ++i) s += row[i];
        db[r] += s;
    }
    gemm_tn(w.value.data(), dy.data(), dx_accum.data(), inner, rows, cols, true);
}

void softmax_over_points(Tensor& logits, int heads, int points) {
    const int n = logits.dim(1);
    for (int m = 0; m < heads; ++m) {
        for (int i = 0; i < n; ++i) {
            double mx = -std::numeric_limits<double>::infinity();
            for (int k = 0; k < points; ++k) mx = std::max(mx, logits.at(m * points + k, i));
            double sum = 0.0;
            for (int k = 0; k < points; ++k) {
                double e = std::exp(logits.at(m * points + k, i) - mx);
                logits.at(m * points + k, i) = e;
                sum += e;
            }
            for (int k = 0; k < points; ++k) logits.at(m * points + k, i) /= sum;
        }
    }
}

}  // namespace

std::pair<Tensor, Tensor> SasBlock::predict_offsets(const Tensor& f_rec) const {
    check(f_rec.dim(0) == cfg_.channels, Error::Kind::shape,
          "recalibrated map channel mismatch");
    const int h = f_rec.dim(1), w = f_rec.dim(2);
    Tensor flat = f_rec;
    flat.reshape({cfg_.channels, h * w});
    Tensor ox = project(wx, bx, flat);
    Tensor oy = project(wy, by, flat);
    ox.reshape({cfg_.heads, cfg_.points, h, w});
    oy.reshape({cfg_.heads, cfg_.points, h, w});
    return {ox, oy};
}

Tensor SasBlock::predict_attention(const Tensor& f_rec) const {
    check(f_rec.dim(0) == cfg_.channels, Error::Kind::shape,
          "recalibrated map channel mismatch");
    const int h = f_rec.dim(1), w = f_rec.dim(2);
    Tensor flat = f_rec;
    flat.reshape({cfg_.channels, h * w});
    Tensor logits = project(watt, batt, flat);
    if (cfg_.encoding == EncodingKind::rpe)
        for (int m = 0; m < cfg_.heads; ++m)
            for (int k = 0; k < cfg_.points; ++k) {
                double bias = rpe_bias.value.at(m, k);
                double* row = logits.data() + static_cast<size_t>(m * cfg_.points + k) * h * w;
                for (int i = 0; i < h * w; ++i) row[i] += bias;
            }
    softmax_over_points(logits, cfg_.heads, cfg_.points);
    logits.reshape({cfg_.heads, cfg_.points, h, w});
    return logits;
}

Tensor SasBlock::forward(const Tensor& level, Cache* cache) const {
    check(level.dim(0) == cfg_.channels, Error::Kind::shape,
          "attention channel mismatch: " + level.shape_str());
    const int c = cfg_.channels, h = level.dim(1), w = level.dim(2);
    const int n = h * w;
    const int heads = cfg_.heads, points = cfg_.points, d = c / heads;

    Tensor f_flat = level;
    f_flat.reshape({c, n});

    // positional recalibration
    Tensor f_rec;
    if (cfg_.encoding == EncodingKind::none || cfg_.encoding == EncodingKind::rpe) {
        f_rec = f_flat;
    } else {
        Tensor p = encoding_for(h, w, cache ? &cache->spe : nullptr);
        p.reshape({c, n});
        f_rec = f_flat;
        f_rec.add_scaled(p);
    }

    Tensor off_x = project(wx, bx, f_rec);
    Tensor off_y = project(wy, by, f_rec);
    Tensor att = project(watt, batt, f_rec);
    if (cfg_.encoding == EncodingKind::rpe)
        for (int m = 0; m < heads; ++m)
            for (int k = 0; k < points; ++k) {
                double bias = rpe_bias.value.at(m, k);
                double* row = att.data() + static_cast<size_t>(m * points + k) * n;
                for (int i = 0; i < n; ++i) row[i] += bias;
            }
    softmax_over_points(att, heads, points);
    Tensor value = project(wvalue, bvalue, f_rec);

    // aggregate sampled values around the (mirrored) reference locations
    Tensor f_att({c, n});
    std::vector<double> sampled;
    if (cache) sampled.assign(static_cast<size_t>(heads) * points * d * n, 0.0);
    std::vector<double> vec(static_cast<size_t>(d));
    const bool mirrored = cfg_.attention == AttentionKind::symmetric;
    for (int m = 0; m < heads; ++m) {
        const double* head_map = value.data() + static_cast<size_t>(m) * d * n;
        for (int k = 0; k < points; ++k) {
            const int row = m * points + k;
            const double* ox_row = off_x.data() + static_cast<size_t>(row) * n;
            const double* oy_row = off_y.data() + static_cast<size_t>(row) * n;
            const double* a_row = att.data() + static_cast<size_t>(row) * n;
            for (int py = 0; py < h; ++py) {
                for (int px = 0; px < w; ++px) {
                    const int i = py * w + px;
                    double sx = px + ox_row[i];
                    if (mirrored) sx = mirror_coordinate(sx, w);
                    const double sy = py + oy_row[i];
                    nn::sample_bilinear(head_map, d, h, w, sy, sx, vec.data());
                    const double a_w = a_row[i];
                    for (int cc = 0; cc < d; ++cc)
                        f_att[(static_cast<int64_t>(m) * d + cc) * n + i] += a_w * vec[cc];
                    if (cache) {
                        double* slot =
                            sampled.data() + (static_cast<size_t>(row) * d) * n + i;
                        for (int cc = 0; cc < d; ++cc)
                            slot[static_cast<size_t>(cc) * n] = vec[cc];
                    }
                }
            }
        }
    }

    // output projection + residual from the block input
    Tensor f_hat_att = project(wproj, bproj, f_att);
    f_hat_att.add_scaled(f_flat);

    // per-position feed-forward with second residual
    Tensor hidden = nn::relu(project(mlp_w1, mlp_b1, f_hat_att));
    Tensor out = project(mlp_w2, mlp_b2, hidden);
    out.add_scaled(f_hat_att);
    out.reshape({c, h, w});

    if (cache) {
        cache->in_shape = level.shape();
        cache->f_rec = std::move(f_rec);
        cache->off_x = std::move(off_x);
        cache->off_y = std::move(off_y);
        cache->att = std::move(att);
        cache->value = std::move(value);
        cache->sampled = std::move(sampled);
        cache->f_att = std::move(f_att);
        cache->f_hat_att = std::move(f_hat_att);
        cache->hidden = std::move(hidden);
    }
    return out;
}

Tensor SasBlock::backward(const Tensor& dy, const Cache& cache, nn::Grads& grads) const {
    const int c = cfg_.channels;
    const int h = cache.in_shape[1], w = cache.in_shape[2];
    const int n = h * w;
    const int heads = cfg_.heads, points = cfg_.points, d = c / heads;
    const bool mirrored = cfg_.attention == AttentionKind::symmetric;

    Tensor dout = dy;
    dout.reshape({c, n});

    // feed-forward backward (out = mlp(f_hat_att) + f_hat_att)
    Tensor d_hat = dout;  // residual branch
    {
        Tensor dh({4 * c, n});
        dh.zero();
        project_backward(mlp_w2, mlp_b2, cache.hidden, dout, grads, dh);
        dh = nn::relu_backward(dh, cache.hidden);
        Tensor d_from_mlp({c, n});
        project_backward(mlp_w1, mlp_b1, cache.f_hat_att, dh, grads, d_from_mlp);
        d_hat.add_scaled(d_from_mlp);
    }

    // projection backward (f_hat_att = proj(f_att) + F)
    Tensor d_f_att({c, n});
    project_backward(wproj, bproj, cache.f_att, d_hat, grads, d_f_att);
    Tensor d_input = d_hat;  // residual from the original input

    // aggregation backward
    Tensor d_value({c, n});
    Tensor d_off_x({heads * points, n});
    Tensor d_off_y({heads * points, n});
    Tensor d_att_post({heads * points, n});
    std::vector<double> dvec(static_cast<size_t>(d));
    for (int m = 0; m < heads; ++m) {
        const double* head_map = cache.value.data() + static_cast<size_t>(m) * d * n;
        double* d_head_map = d_value.data() + static_cast<size_t>(m) * d * n;
        for (int k = 0; k < points; ++k) {
            const int row = m * points + k;
            const double* ox_row = cache.off_x.data() + static_cast<size_t>(row) * n;
            const double* oy_row = cache.off_y.data() + static_cast<size_t>(row) * n;
            const double* a_row = cache.att.data() + static_cast<size_t>(row) * n;
            const double* samp = cache.sampled.data() + (static_cast<size_t>(row) * d) * n;
            for (int py = 0; py < h; ++py) {
                for (int px = 0; px < w; ++px) {
                    const int i = py * w + px;
                    double dot = 0.0;
                    for (int cc = 0; cc < d; ++cc) {
                        double g = d_f_att[(static_cast<int64_t>(m) * d + cc) * n + i];
                        dvec[static_cast<size_t>(cc)] = g * a_row[i];
                        dot += g * samp[static_cast<size_t>(cc) * n + i];
                    }
                    d_att_post.at(row, i) = dot;
                    double sx = px + ox_row[i];
                    if (mirrored) sx = mirror_coordinate(sx, w);
                    const double sy = py + oy_row[i];
                    double gy = 0.0, gx = 0.0;
                    nn::sample_bilinear_backward(head_map, d, h, w, sy, sx, dvec.data(),
                                                 d_head_map, &gy, &gx);
                    d_off_y.at(row, i) = gy;
                    d_off_x.at(row, i) = mirrored ? -gx : gx;
                }
            }
        }
    }

    // softmax backward over K
    Tensor d_logits({heads * points, n});
    for (int m = 0; m < heads; ++m) {
        for (int i = 0; i < n; ++i) {
            double inner = 0.0;
            for (int k = 0; k < points; ++k)
                inner += cache.att.at(m * points + k, i) * d_att_post.at(m * points + k, i);
            for (int k = 0; k < points; ++k) {
                const int row = m * points + k;
                d_logits.at(row, i) =
                    cache.att.at(row, i) * (d_att_post.at(row, i) - inner);
            }
        }
    }
    if (cfg_.encoding == EncodingKind::rpe) {
        Tensor& db = grads.of(rpe_bias);
        for (int m = 0; m < heads; ++m)
            for (int k = 0; k < points; ++k) {
                const double* row = d_logits.data() + static_cast<size_t>(m * points + k) * n;
                double s = 0.0;
                for (int i = 0; i < n; ++i) s += row[i];
                db.at(m, k) += s;
            }
    }

    // projections backward into the recalibrated map
    Tensor d_f_rec({c, n});
    project_backward(wx, bx, cache.f_rec, d_off_x, grads, d_f_rec);
    project_backward(wy, by, cache.f_rec, d_off_y, grads, d_f_rec);
    project_backward(watt, batt, cache.f_rec, d_logits, grads, d_f_rec);
    project_backward(wvalue, bvalue, cache.f_rec, d_value, grads, d_f_rec);

    // positional-encoding backward (the encoding is constant w.r.t. the
    // input; only the warp parameters receive gradients)
    if (cfg_.encoding == EncodingKind::spe) {
        Tensor d_enc = d_f_rec;
        d_enc.reshape({c, h, w});
        spe_.backward(d_enc, cache.spe, grads, /*need_dx=*/false);
    }
    d_input.add_scaled(d_f_rec);
    d_input.reshape({c, h, w});
    return d_input;
}

std::vector<AblationSpec> ablation_grid() {
    using A = AttentionKind;
    using E = EncodingKind;
    using S = enc::SpeSide;
    std::vector<AblationSpec> grid;
    grid.push_back({"baseline", A::none, E::none, false, S::right_to_left});
    for (A a : {A::vanilla, A::symmetric}) {
        const std::string p = a == A::vanilla ? "vanilla" : "symattention";
        grid.push_back({p + "+ape", a, E::ape, false, S::right_to_left});
        grid.push_back({p + "+rpe", a, E::rpe, false, S::right_to_left});
        grid.push_back({p + "+spe-nostn-l2r", a, E::spe, false, S::left_to_right});
        grid.push_back({p + "+spe-nostn-r2l", a, E::spe, false, S::right_to_left});
        grid.push_back({p + "+spe-l2r", a, E::spe, true, S::left_to_right});
        grid.push_back({p + "+spe-r2l", a, E::spe, true, S::right_to_left});
    }
    return grid;
}

std::vector<Tensor> pyramid_forward(const SasBlock& block,
                                    const std::vector<Tensor>& levels,
                                    std::vector<SasBlock::Cache>* caches) {
    for (const Tensor& l : levels)
        check(l.dim(0) == block.config().channels, Error::Kind::shape,
              "pyramid level channel mismatch: " + l.shape_str());
    if (caches) caches->resize(levels.size());
    std::vector<Tensor> out;
    out.reserve(levels.size());
    for (size_t i = 0; i < levels.size(); ++i)
        out.push_back(block.forward(levels[i], caches ? &(*caches)[i] : nullptr));
    return out;
}

}  // namespace ctd::attn
