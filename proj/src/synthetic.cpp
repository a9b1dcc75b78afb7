#include "ctd/synthetic.hpp"

#include <algorithm>
#include <cmath>

#include "ctd/error.hpp"
#include "ctd/png_io.hpp"
#include "ctd/rng.hpp"

namespace ctd::data {

void SynthConfig::validate_fields() const {
    for (const auto& [cls, n] : counts)
        check(n >= 0, Error::Kind::config,
              std::string("negative count for ") + to_string(cls));
    check(image_size >= 16, Error::Kind::config, "image_size too small");
    check(lesion_count_min >= 1 && lesion_count_max >= lesion_count_min,
          Error::Kind::config, "bad lesion count range");
    check(lesion_size_min > 0 && lesion_size_max >= lesion_size_min &&
              lesion_size_max < image_size,
          Error::Kind::config, "lesion sizes must be positive and smaller than the image");
    check(jitter_px >= 0, Error::Kind::config, "jitter must be non-negative");
}

namespace {

struct Blob {
    double cx, cy, sigma, contrast;
};

// plane is rows*cols row-major; tails clip at the buffer edges
void render_blob(std::vector<double>& plane, int rows, int cols, const Blob& b) {
    const double radius = 2.5 * b.sigma;
    const int x0 = std::max(0, static_cast<int>(std::floor(b.cx - radius)));
    const int x1 = std::min(cols - 1, static_cast<int>(std::ceil(b.cx + radius)));
    const int y0 = std::max(0, static_cast<int>(std::floor(b.cy - radius)));
    const int y1 = std::min(rows - 1, static_cast<int>(std::ceil(b.cy + radius)));
    const double inv = 1.0 / (2.0 * b.sigma * b.sigma);
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            const double d2 = (x - b.cx) * (x - b.cx) + (y - b.cy) * (y - b.cy);
            plane[static_cast<size_t>(y) * cols + x] += b.contrast * std::exp(-d2 * inv);
        }
}

void gaussian_blur_1d(std::vector<double>& data, int rows, int cols, double sigma,
                      bool horizontal) {
    const int radius = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
    std::vector<double> kernel(static_cast<size_t>(2 * radius + 1));
    double sum = 0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[static_cast<size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
        sum += kernel[static_cast<size_t>(i + radius)];
    }
    for (double& k : kernel) k /= sum;
    std::vector<double> out(data.size());
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            double acc = 0;
            for (int i = -radius; i <= radius; ++i) {
                int rr = r, cc = c;
                (horizontal ? cc : rr) += i;
                rr = std::clamp(rr, 0, rows - 1);
                cc = std::clamp(cc, 0, cols - 1);
                acc += kernel[static_cast<size_t>(i + radius)] *
                       data[static_cast<size_t>(rr) * cols + cc];
            }
            out[static_cast<size_t>(r) * cols + c] = acc;
        }
    }
    data = std::move(out);
}

/// Symmetric background: fine blurred-noise texture plus a handful of
/// bump distractors, all generated on a half-width buffer that is then
/// mirrored — the zero-jitter image is exactly symmetric by construction.
std::vector<double> symmetric_background(int size, double amplitude, Rng& rng) {
    const int half = (size + 1) / 2;
    std::vector<double> left(static_cast<size_t>(size) * half);
    for (double& v : left) v = rng.uniform(-1.0, 1.0);
    gaussian_blur_1d(left, size, half, std::max(2.0, size / 24.0), true);
    gaussian_blur_1d(left, size, half, std::max(2.0, size / 24.0), false);
    double sq = 0;
    for (double v : left) sq += v * v;
    const double norm = std::sqrt(sq / static_cast<double>(left.size()));
    const double tex_scale = norm > 0 ? 0.25 * amplitude / norm : 0.0;
    for (double& v : left) v *= tex_scale;

    // bump distractors, contrast comparable to dim lesions
    const int bumps = std::max(2, size / 16);
    for (int i = 0; i < bumps; ++i) {
        Blob b;
        b.sigma = rng.uniform(2.5, 5.5);
        b.cx = rng.uniform(2.0, half - 2.0);
        b.cy = rng.uniform(2.0, size - 3.0);
        const double sign = rng.bernoulli(0.7) ? 1.0 : -1.0;
        b.contrast = sign * rng.uniform(0.3, 1.0) * amplitude;
        render_blob(left, size, half, b);
    }

    std::vector<double> plane(static_cast<size_t>(size) * size);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const int sx = x < half ? x : size - 1 - x;
            plane[static_cast<size_t>(y) * size + x] =
                0.45 + left[static_cast<size_t>(y) * half + sx];
        }
    return plane;
}

struct Affine {
    // maps canonical coordinates to output coordinates
    double cos_t = 1, sin_t = 0, tx = 0, ty = 0, cx = 0, cy = 0;

    void apply(double x, double y, double* ox, double* oy) const {
        const double dx = x - cx, dy = y - cy;
        *ox = cos_t * dx - sin_t * dy + cx + tx;
        *oy = sin_t * dx + cos_t * dy + cy + ty;
    }
    void invert(double x, double y, double* ox, double* oy) const {
        const double dx = x - cx - tx, dy = y - cy - ty;
        *ox = cos_t * dx + sin_t * dy + cx;
        *oy = -sin_t * dx + cos_t * dy + cy;
    }
};

std::vector<double> warp_image(const std::vector<double>& plane, int size,
                               const Affine& a) {
    std::vector<double> out(plane.size());
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            double sx, sy;
            a.invert(x, y, &sx, &sy);
            sx = std::clamp(sx, 0.0, size - 1.0);
            sy = std::clamp(sy, 0.0, size - 1.0);
            const int x0 = std::min(static_cast<int>(sx), size - 2);
            const int y0 = std::min(static_cast<int>(sy), size - 2);
            const double fx = sx - x0, fy = sy - y0;
            const auto at = [&](int yy, int xx) {
                return plane[static_cast<size_t>(yy) * size + xx];
            };
            out[static_cast<size_t>(y) * size + x] =
                (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
                fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
        }
    return out;
}

}  // namespace

DatasetIndex generate_synthetic(const SynthConfig& cfg,
                                const std::filesystem::path& out_dir) {
    cfg.validate_fields();
    const int size = cfg.image_size;

    std::error_code ec;
    std::filesystem::create_directories(out_dir / "images", ec);
    check(!ec, Error::Kind::io, "cannot create " + (out_dir / "images").string());

    DatasetIndex index;
    index.split = cfg.split;
    Rng master(cfg.seed);

    int global_idx = 0;
    for (ImageClass cls : {ImageClass::healthy, ImageClass::sick_non_tb,
                           ImageClass::tb_active, ImageClass::tb_latent,
                           ImageClass::tb_active_latent, ImageClass::tb_uncertain}) {
        const auto it = cfg.counts.find(cls);
        const int n = it == cfg.counts.end() ? 0 : it->second;
        for (int i = 0; i < n; ++i, ++global_idx) {
            Rng rng = master.fork(static_cast<uint64_t>(global_idx));

            Affine jitter;
            jitter.cx = (size - 1) / 2.0;
            jitter.cy = (size - 1) / 2.0;
            const bool warped = cfg.jitter_px > 0;
            if (warped) {
                const double theta =
                    rng.uniform(-cfg.jitter_px, cfg.jitter_px) / (size / 2.0);
                jitter.cos_t = std::cos(theta);
                jitter.sin_t = std::sin(theta);
                jitter.tx = rng.uniform(-cfg.jitter_px, cfg.jitter_px);
                jitter.ty = rng.uniform(-cfg.jitter_px, cfg.jitter_px);
            }

            std::vector<double> plane = symmetric_background(size, cfg.background_amplitude, rng);

            CxrRecord rec;
            char buf[64];
            std::snprintf(buf, sizeof(buf), "%s_%s_%04d", cfg.split.c_str(), to_string(cls),
                          i);
            rec.image_id = buf;
            rec.file_name = "images/" + rec.image_id + ".png";
            rec.width = size;
            rec.height = size;
            rec.gender = rng.bernoulli(0.1)
                             ? Gender::unknown
                             : (rng.bernoulli(0.5) ? Gender::male : Gender::female);
            rec.age = rng.bernoulli(0.05) ? -1 : rng.uniform_int(18, 90);
            rec.image_class = cls;

            auto draw_lesion_at = [&](double cx, double cy, double side) {
                Blob b{cx, cy, side / 4.0,
                       rng.uniform(cfg.lesion_contrast_min, cfg.lesion_contrast_max)};
                render_blob(plane, size, size, b);
                return b;
            };

            // a canonical-frame center whose post-jitter box stays inside
            auto sample_center = [&](bool left_side, double side, double* cx, double* cy) {
                const double margin = side / 2.0 + 2.0 * cfg.jitter_px + 2.0;
                const double gap = side / 2.0 + 2.0;  // keep clear of the center line
                for (int attempt = 0; attempt < 200; ++attempt) {
                    double x = left_side ? rng.uniform(margin, size / 2.0 - gap)
                                         : rng.uniform(size / 2.0 + gap, size - margin);
                    double y = rng.uniform(margin, size - margin);
                    double jx, jy;
                    jitter.apply(x, y, &jx, &jy);
                    if (jx - side / 2 >= 0 && jx + side / 2 <= size - 1 &&
                        jy - side / 2 >= 0 && jy + side / 2 <= size - 1) {
                        *cx = x;
                        *cy = y;
                        return;
                    }
                }
                throw Error(Error::Kind::config,
                            "cannot place a lesion inside the image; lesion or jitter too "
                            "large for image_size");
            };

            if (cls == ImageClass::sick_non_tb) {
                const int count = rng.uniform_int(cfg.lesion_count_min, cfg.lesion_count_max);
                for (int k = 0; k < count; ++k) {
                    const double side = rng.uniform(cfg.lesion_size_min, cfg.lesion_size_max);
                    double cx, cy;
                    sample_center(true, side, &cx, &cy);
                    Blob b = draw_lesion_at(cx, cy, side);
                    Blob twin = b;
                    twin.cx = size - 1 - b.cx;
                    render_blob(plane, size, size, twin);
                }
            } else if (has_boxes(cls)) {
                int count = rng.uniform_int(cfg.lesion_count_min, cfg.lesion_count_max);
                if (cls == ImageClass::tb_active_latent) count = std::max(count, 2);
                const bool left_side = rng.bernoulli(0.5);
                for (int k = 0; k < count; ++k) {
                    const double side = rng.uniform(cfg.lesion_size_min, cfg.lesion_size_max);
                    double cx, cy;
                    sample_center(left_side, side, &cx, &cy);
                    draw_lesion_at(cx, cy, side);
                    double jx, jy;
                    jitter.apply(cx, cy, &jx, &jy);
                    TbBox box;
                    box.x = jx - side / 2;
                    box.y = jy - side / 2;
                    box.w = side;
                    box.h = side;
                    if (cls == ImageClass::tb_active) box.tb_class = TbClass::active_tb;
                    if (cls == ImageClass::tb_latent) box.tb_class = TbClass::latent_tb;
                    if (cls == ImageClass::tb_active_latent)
                        box.tb_class = k < (count + 1) / 2 ? TbClass::active_tb
                                                           : TbClass::latent_tb;
                    rec.boxes.push_back(box);
                }
            }

            if (warped) plane = warp_image(plane, size, jitter);
            for (double& v : plane) v = std::clamp(v, 0.0, 1.0);
            GrayImage img;
            img.width = size;
            img.height = size;
            img.bit_depth = 8;
            img.pixels.resize(plane.size());
            for (size_t p = 0; p < plane.size(); ++p)
                img.pixels[p] = static_cast<uint16_t>(std::lround(plane[p] * 255.0));
            write_gray_png(out_dir / rec.file_name, img);

            index.records.push_back(std::move(rec));
        }
    }
    index.recount();
    validate(index);
    save_dataset(out_dir / (cfg.split + ".json"), index);
    return index;
}

}  // namespace ctd::data
