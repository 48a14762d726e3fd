#include "lvlmlens/toymodel.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numbers>
#include <random>

#include "lvlmlens/digest.hpp"

namespace lvlmlens::toy {

namespace {

constexpr double kLayerNormEps = 1e-5;

void fail_config(const std::string& why) { throw Error(ErrorCode::InvalidConfig, why); }

// Uniform doubles from the raw 64-bit stream so results do not depend on the
// standard library's distribution implementations.
class WeightRng {
public:
    explicit WeightRng(std::uint64_t seed) : engine_(seed) {}

    double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double symmetric(double half_width) { return (2.0 * uniform01() - 1.0) * half_width; }

    // Uniform with the given standard deviation.
    Matrix matrix(std::size_t rows, std::size_t cols, double stddev) {
        Matrix m(rows, cols);
        const double a = std::sqrt(3.0) * stddev;
        for (double& v : m.values()) v = symmetric(a);
        return m;
    }

private:
    std::mt19937_64 engine_;
};

Matrix matmul(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aik * b(k, j);
        }
    return out;
}

// a * b^T
Matrix matmul_bt(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.rows(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(j, k);
            out(i, j) = s;
        }
    return out;
}

void add_in_place(Matrix& a, const Matrix& b) {
    auto av = a.values();
    auto bv = b.values();
    for (std::size_t n = 0; n < av.size(); ++n) av[n] += bv[n];
}

struct LayerNormOut {
    Matrix norm;
    std::vector<double> rstd;
    Matrix out;
};

LayerNormOut layer_norm(const Matrix& x, std::span<const double> gain, std::span<const double> bias) {
    const std::size_t S = x.rows(), d = x.cols();
    LayerNormOut r{Matrix(S, d), std::vector<double>(S), Matrix(S, d)};
    for (std::size_t i = 0; i < S; ++i) {
        double mu = 0.0;
        for (std::size_t k = 0; k < d; ++k) mu += x(i, k);
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t k = 0; k < d; ++k) var += (x(i, k) - mu) * (x(i, k) - mu);
        var /= static_cast<double>(d);
        const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
        r.rstd[i] = rstd;
        for (std::size_t k = 0; k < d; ++k) {
            r.norm(i, k) = (x(i, k) - mu) * rstd;
            r.out(i, k) = gain[k] * r.norm(i, k) + bias[k];
        }
    }
    return r;
}

Matrix layer_norm_backward(const Matrix& dout, const Matrix& norm, std::span<const double> rstd,
                           std::span<const double> gain) {
    const std::size_t S = dout.rows(), d = dout.cols();
    Matrix dx(S, d);
    std::vector<double> dn(d);
    for (std::size_t i = 0; i < S; ++i) {
        double mean_dn = 0.0, mean_dn_n = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
            dn[k] = dout(i, k) * gain[k];
            mean_dn += dn[k];
            mean_dn_n += dn[k] * norm(i, k);
        }
        mean_dn /= static_cast<double>(d);
        mean_dn_n /= static_cast<double>(d);
        for (std::size_t k = 0; k < d; ++k) dx(i, k) = rstd[i] * (dn[k] - mean_dn - norm(i, k) * mean_dn_n);
    }
    return dx;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + x * pdf;
}

double position_code(int pos, int k, int d) {
    const double freq = std::pow(10000.0, -static_cast<double>(2 * (k / 2)) / static_cast<double>(d));
    return (k % 2 == 0) ? std::sin(pos * freq) : std::cos(pos * freq);
}

void hash_doubles(std::vector<std::uint8_t>& buf, std::span<const double> v) {
    for (double x : v) {
        const auto bits = std::bit_cast<std::uint64_t>(x);
        for (int b = 0; b < 8; ++b) buf.push_back(static_cast<std::uint8_t>(bits >> (8 * b)));
    }
}

}  // namespace

void ToyConfig::validate() const {
    if (d_model < 1) fail_config("d_model must be >= 1");
    if (num_layers < 1) fail_config("num_layers must be >= 1");
    if (num_heads < 1) fail_config("num_heads must be >= 1");
    if (d_model % num_heads != 0)
        fail_config("d_model " + std::to_string(d_model) + " not divisible by num_heads " + std::to_string(num_heads));
    if (vocab_size < 8) fail_config("vocab_size must be >= 8");
    if (patch_rows < 1 || patch_cols < 1) fail_config("patch grid must be at least 1x1");
    if (feature_blocks < 1 || patch_pixels < 1 || patch_pixels % feature_blocks != 0)
        fail_config("patch_pixels must be a positive multiple of feature_blocks");
    if (max_new_tokens < 1) fail_config("max_new_tokens must be >= 1");
}

std::vector<int> GenerationRecord::generated_indices() const {
    std::vector<int> out;
    for (int n = 0; n < static_cast<int>(generated.size()); ++n) out.push_back(first_generated_index() + n);
    return out;
}

int GenerationRecord::token_at(int g) const {
    const int offset = g - first_generated_index();
    if (offset < 0 || offset >= static_cast<int>(generated.size()))
        throw Error(ErrorCode::NotAGeneratedToken, "position " + std::to_string(g) + " is not generated");
    return generated[static_cast<std::size_t>(offset)];
}

SyntheticImage SyntheticImage::generate(const ToyConfig& config, std::uint64_t seed) {
    config.validate();
    WeightRng rng(seed ^ 0x9E3779B97F4A7C15ull);
    RgbImage px;
    px.width = config.patch_cols * config.patch_pixels;
    px.height = config.patch_rows * config.patch_pixels;
    px.pixels.resize(static_cast<std::size_t>(px.width) * px.height * 3);
    // One base colour per patch plus per-pixel jitter.
    std::vector<std::array<double, 3>> base(static_cast<std::size_t>(config.num_patches()));
    for (auto& c : base)
        for (double& ch : c) ch = 30.0 + 195.0 * rng.uniform01();
    for (int y = 0; y < px.height; ++y)
        for (int x = 0; x < px.width; ++x) {
            const int patch = (y / config.patch_pixels) * config.patch_cols + x / config.patch_pixels;
            for (int ch = 0; ch < 3; ++ch) {
                const double v = base[static_cast<std::size_t>(patch)][ch] + rng.symmetric(25.0);
                px.at(x, y)[ch] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0l, 255l));
            }
        }
    return from_pixels(std::move(px), config.patch_rows, config.patch_cols, config.feature_blocks);
}

SyntheticImage SyntheticImage::from_pixels(RgbImage pixels, int rows, int cols, int feature_blocks) {
    if (rows < 1 || cols < 1 || feature_blocks < 1 || pixels.width % (cols * feature_blocks) != 0 ||
        pixels.height % (rows * feature_blocks) != 0)
        throw Error(ErrorCode::InvalidConfig, "image size not divisible into patch blocks");
    SyntheticImage img;
    img.rows = rows;
    img.cols = cols;
    img.feature_blocks = feature_blocks;
    const int bw = pixels.width / (cols * feature_blocks);
    const int bh = pixels.height / (rows * feature_blocks);
    const int dim = img.patch_dim();
    img.features.assign(static_cast<std::size_t>(rows) * cols * dim, 0.0);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
            for (int br = 0; br < feature_blocks; ++br)
                for (int bc = 0; bc < feature_blocks; ++bc) {
                    std::array<long, 3> sum{};
                    const int y0 = (r * feature_blocks + br) * bh;
                    const int x0 = (c * feature_blocks + bc) * bw;
                    for (int y = y0; y < y0 + bh; ++y)
                        for (int x = x0; x < x0 + bw; ++x)
                            for (int ch = 0; ch < 3; ++ch) sum[ch] += pixels.at(x, y)[ch];
                    const double count = static_cast<double>(bw) * bh;
                    for (int ch = 0; ch < 3; ++ch) {
                        const std::size_t at = static_cast<std::size_t>(r * cols + c) * dim +
                                               static_cast<std::size_t>((br * feature_blocks + bc) * 3 + ch);
                        img.features[at] = static_cast<double>(sum[ch]) / count / 255.0;
                    }
                }
    img.pixels = std::move(pixels);
    return img;
}

std::vector<double> SyntheticImage::mean_feature() const {
    std::vector<double> mean(static_cast<std::size_t>(patch_dim()), 0.0);
    for (int p = 0; p < num_patches(); ++p) {
        auto f = feature(p);
        for (std::size_t k = 0; k < mean.size(); ++k) mean[k] += f[k];
    }
    for (double& m : mean) m /= num_patches();
    return mean;
}

SyntheticImage SyntheticImage::with_masked_patches(std::span<const int> patches) const {
    SyntheticImage out = *this;
    const auto mean = mean_feature();
    for (int p : patches) {
        if (p < 0 || p >= num_patches()) throw Error(ErrorCode::IndexOutOfRange, "patch " + std::to_string(p));
        std::copy(mean.begin(), mean.end(), out.features.begin() + static_cast<std::ptrdiff_t>(p) * patch_dim());
    }
    return out;
}

ToyModel ToyModel::init(const ToyConfig& config) {
    config.validate();
    const auto d = static_cast<std::size_t>(config.d_model);
    const std::size_t hidden = 4 * d;
    WeightRng rng(config.seed);
    ToyWeights w;
    w.token_embedding = rng.matrix(static_cast<std::size_t>(config.vocab_size), d, 1.0);
    w.patch_projection = rng.matrix(static_cast<std::size_t>(config.patch_dim()), d,
                                    2.0 / std::sqrt(static_cast<double>(config.patch_dim())));
    w.patch_bias = std::vector<double>(d);
    for (double& b : w.patch_bias) b = rng.symmetric(0.5);
    w.position_scale = 1.0;
    const double proj = 1.0 / std::sqrt(static_cast<double>(d));
    for (int l = 0; l < config.num_layers; ++l) {
        LayerWeights lw;
        lw.ln1_gain.assign(d, 1.0);
        lw.ln1_bias.assign(d, 0.0);
        // Larger query/key scale gives peaked, non-uniform attention rows.
        lw.wq = rng.matrix(d, d, 2.0 * proj);
        lw.wk = rng.matrix(d, d, 2.0 * proj);
        lw.wv = rng.matrix(d, d, proj);
        lw.wo = rng.matrix(d, d, proj);
        lw.ln2_gain.assign(d, 1.0);
        lw.ln2_bias.assign(d, 0.0);
        lw.w1 = rng.matrix(d, hidden, proj);
        lw.b1.assign(hidden, 0.0);
        lw.w2 = rng.matrix(hidden, d, 1.0 / std::sqrt(static_cast<double>(hidden)));
        lw.b2.assign(d, 0.0);
        w.layers.push_back(std::move(lw));
    }
    w.final_gain.assign(d, 1.0);
    w.final_bias.assign(d, 0.0);
    return ToyModel(config, std::move(w));
}

std::string ToyModel::weight_digest() const {
    std::vector<std::uint8_t> buf;
    hash_doubles(buf, weights_.token_embedding.values());
    hash_doubles(buf, weights_.patch_projection.values());
    hash_doubles(buf, weights_.patch_bias);
    hash_doubles(buf, std::span<const double>(&weights_.position_scale, 1));
    for (const auto& lw : weights_.layers) {
        for (const auto* v : {&lw.ln1_gain, &lw.ln1_bias, &lw.ln2_gain, &lw.ln2_bias, &lw.b1, &lw.b2})
            hash_doubles(buf, *v);
        for (const auto* m : {&lw.wq, &lw.wk, &lw.wv, &lw.wo, &lw.w1, &lw.w2}) hash_doubles(buf, m->values());
    }
    hash_doubles(buf, weights_.final_gain);
    hash_doubles(buf, weights_.final_bias);
    return sha256_hex(buf);
}

ForwardRecord run_forward(const ToyModel& model, std::span<const int> tokens, const SyntheticImage& image,
                          const std::optional<AttentionPerturbation>& perturb) {
    const ToyConfig& cfg = model.config();
    const ToyWeights& w = model.weights();
    if (image.num_patches() != cfg.num_patches() || image.patch_dim() != cfg.patch_dim())
        throw Error(ErrorCode::InvalidConfig, "image layout does not match model config");
    for (int id : tokens)
        if (id < 0 || id >= cfg.vocab_size)
            throw Error(ErrorCode::VocabOverflow,
                        "token id " + std::to_string(id) + " outside vocab of " + std::to_string(cfg.vocab_size));

    const int P = cfg.num_patches();
    const int S = P + static_cast<int>(tokens.size());
    const int d = cfg.d_model;
    const int H = cfg.num_heads;
    const int dh = d / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    ForwardRecord rec;
    rec.num_patches = P;
    rec.token_ids.assign(tokens.begin(), tokens.end());
    rec.attention = AttentionMaps(cfg.num_layers, H, S);

    Matrix x(static_cast<std::size_t>(S), static_cast<std::size_t>(d));
    for (int p = 0; p < P; ++p) {
        auto f = image.feature(p);
        for (int k = 0; k < d; ++k) {
            double v = w.patch_bias[k];
            for (int m = 0; m < cfg.patch_dim(); ++m) v += f[m] * w.patch_projection(m, k);
            x(p, k) = v;
        }
    }
    for (int n = 0; n < static_cast<int>(tokens.size()); ++n)
        for (int k = 0; k < d; ++k) x(P + n, k) = w.token_embedding(tokens[n], k);
    for (int i = 0; i < S; ++i)
        for (int k = 0; k < d; ++k) x(i, k) += w.position_scale * position_code(i, k, d);
    rec.hidden.push_back(x);

    for (int l = 0; l < cfg.num_layers; ++l) {
        const LayerWeights& lw = w.layers[l];
        detail::LayerCache c;
        c.input = x;
        auto ln1 = layer_norm(x, lw.ln1_gain, lw.ln1_bias);
        c.ln1_norm = std::move(ln1.norm);
        c.ln1_rstd = std::move(ln1.rstd);
        c.q = matmul(ln1.out, lw.wq);
        c.k = matmul(ln1.out, lw.wk);
        c.v = matmul(ln1.out, lw.wv);

        Matrix o(static_cast<std::size_t>(S), static_cast<std::size_t>(d));
        std::vector<double> row(static_cast<std::size_t>(S));
        for (int h = 0; h < H; ++h) {
            const int off = h * dh;
            for (int i = 0; i < S; ++i) {
                double mx = -std::numeric_limits<double>::infinity();
                for (int j = 0; j <= i; ++j) {
                    double s = 0.0;
                    for (int k = 0; k < dh; ++k) s += c.q(i, off + k) * c.k(j, off + k);
                    row[j] = s * scale;
                    mx = std::max(mx, row[j]);
                }
                double z = 0.0;
                for (int j = 0; j <= i; ++j) {
                    row[j] = std::exp(row[j] - mx);
                    z += row[j];
                }
                for (int j = 0; j <= i; ++j) rec.attention(l, h, i, j) = row[j] / z;
            }
            for (int i = 0; i < S; ++i)
                for (int j = 0; j <= i; ++j) {
                    double a = rec.attention(l, h, i, j);
                    if (perturb && perturb->layer == l && perturb->head == h && perturb->row == i && perturb->col == j)
                        a += perturb->delta;
                    for (int k = 0; k < dh; ++k) o(i, off + k) += a * c.v(j, off + k);
                }
        }
        Matrix y = x;
        add_in_place(y, matmul(o, lw.wo));

        auto ln2 = layer_norm(y, lw.ln2_gain, lw.ln2_bias);
        c.ln2_norm = std::move(ln2.norm);
        c.ln2_rstd = std::move(ln2.rstd);
        c.mlp_pre = matmul(ln2.out, lw.w1);
        for (std::size_t i = 0; i < c.mlp_pre.rows(); ++i)
            for (std::size_t k = 0; k < c.mlp_pre.cols(); ++k) c.mlp_pre(i, k) += lw.b1[k];
        c.mlp_act = c.mlp_pre;
        for (double& v : c.mlp_act.values()) v = gelu(v);
        Matrix m = matmul(c.mlp_act, lw.w2);
        for (std::size_t i = 0; i < m.rows(); ++i)
            for (std::size_t k = 0; k < m.cols(); ++k) m(i, k) += lw.b2[k];
        add_in_place(y, m);
        x = std::move(y);
        rec.hidden.push_back(x);
        rec.cache.push_back(std::move(c));
    }

    auto lnf = layer_norm(x, w.final_gain, w.final_bias);
    rec.final_norm = std::move(lnf.norm);
    rec.final_rstd = std::move(lnf.rstd);
    rec.logits = matmul_bt(lnf.out, w.token_embedding);
    return rec;
}

GenerationRecord generate_greedy(const ToyModel& model, std::span<const int> prompt, const SyntheticImage& image,
                                 int max_new) {
    if (max_new < 1) throw Error(ErrorCode::InvalidConfig, "max_new must be >= 1");
    GenerationRecord gen;
    gen.prompt.assign(prompt.begin(), prompt.end());
    std::vector<int> seq = gen.prompt;
    const int vocab = model.config().vocab_size;
    for (int step = 0; step < max_new; ++step) {
        const auto rec = run_forward(model, seq, image);
        const auto last = rec.logits.row(rec.logits.rows() - 1);
        int best = 0;
        for (int v = 1; v < vocab; ++v)
            if (last[v] > last[best]) best = v;
        seq.push_back(best);
        gen.generated.push_back(best);
    }
    gen.replay = run_forward(model, seq, image);
    return gen;
}

AttentionMaps attention_gradients(const ToyModel& model, const GenerationRecord& record, int g) {
    const int target = record.token_at(g);
    const ToyConfig& cfg = model.config();
    const ToyWeights& w = model.weights();
    const ForwardRecord& rec = record.replay;
    const int S = rec.seq_len();
    const int d = cfg.d_model;
    const int H = cfg.num_heads;
    const int dh = d / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const int q = g - 1;

    AttentionMaps grads(cfg.num_layers, H, S);

    // logits = LN_f(x) * E^T; only row q carries signal.
    Matrix df(static_cast<std::size_t>(S), static_cast<std::size_t>(d));
    for (int k = 0; k < d; ++k) df(q, k) = w.token_embedding(target, k);
    Matrix dx = layer_norm_backward(df, rec.final_norm, rec.final_rstd, w.final_gain);

    for (int l = cfg.num_layers - 1; l >= 0; --l) {
        const LayerWeights& lw = w.layers[l];
        const detail::LayerCache& c = rec.cache[l];

        // MLP branch.
        Matrix dy = dx;
        Matrix dact = matmul_bt(dx, lw.w2);
        for (std::size_t i = 0; i < dact.rows(); ++i)
            for (std::size_t k = 0; k < dact.cols(); ++k) dact(i, k) *= gelu_grad(c.mlp_pre(i, k));
        Matrix dz = matmul_bt(dact, lw.w1);
        add_in_place(dy, layer_norm_backward(dz, c.ln2_norm, c.ln2_rstd, lw.ln2_gain));

        // Attention branch.
        Matrix dprev = dy;
        Matrix d_o = matmul_bt(dy, lw.wo);
        Matrix dq(static_cast<std::size_t>(S), static_cast<std::size_t>(d));
        Matrix dk(static_cast<std::size_t>(S), static_cast<std::size_t>(d));
        Matrix dv(static_cast<std::size_t>(S), static_cast<std::size_t>(d));
        std::vector<double> da(static_cast<std::size_t>(S));
        for (int h = 0; h < H; ++h) {
            const int off = h * dh;
            for (int i = 0; i < S; ++i) {
                double weighted = 0.0;
                for (int j = 0; j <= i; ++j) {
                    double s = 0.0;
                    for (int k = 0; k < dh; ++k) s += d_o(i, off + k) * c.v(j, off + k);
                    da[j] = s;
                    grads(l, h, i, j) = s;
                    const double a = rec.attention(l, h, i, j);
                    weighted += a * s;
                    for (int k = 0; k < dh; ++k) dv(j, off + k) += a * d_o(i, off + k);
                }
                for (int j = 0; j <= i; ++j) {
                    const double dscore = rec.attention(l, h, i, j) * (da[j] - weighted) * scale;
                    if (dscore == 0.0) continue;
                    for (int k = 0; k < dh; ++k) {
                        dq(i, off + k) += dscore * c.k(j, off + k);
                        dk(j, off + k) += dscore * c.q(i, off + k);
                    }
                }
            }
        }
        Matrix du = matmul_bt(dq, lw.wq);
        add_in_place(du, matmul_bt(dk, lw.wk));
        add_in_place(du, matmul_bt(dv, lw.wv));
        add_in_place(dprev, layer_norm_backward(du, c.ln1_norm, c.ln1_rstd, lw.ln1_gain));
        dx = std::move(dprev);
    }
    return grads;
}

std::string model_id_for(const ToyConfig& config) {
    std::string id = "toy-v1-seed" + std::to_string(config.seed);
    const ToyConfig defaults;
    if (config.d_model != defaults.d_model || config.num_layers != defaults.num_layers ||
        config.num_heads != defaults.num_heads || config.vocab_size != defaults.vocab_size ||
        config.patch_rows != defaults.patch_rows || config.patch_cols != defaults.patch_cols)
        id += "-d" + std::to_string(config.d_model) + "-L" + std::to_string(config.num_layers) + "-H" +
              std::to_string(config.num_heads) + "-V" + std::to_string(config.vocab_size) + "-g" +
              std::to_string(config.patch_rows) + "x" + std::to_string(config.patch_cols);
    return id;
}

trace::Trace build_trace(const ToyModel& model, const GenerationRecord& record,
                         const std::map<int, AttentionMaps>& gradients, const SyntheticImage& image) {
    const ToyConfig& cfg = model.config();
    const ForwardRecord& rec = record.replay;
    const int S = rec.seq_len();
    const int L = cfg.num_layers;
    const int H = cfg.num_heads;

    auto to_f32 = [&](const AttentionMaps& m) {
        if (m.layers != L || m.heads != H || m.seq != S)
            throw Error(ErrorCode::ShapeMismatch, "tensor shape differs from the replay");
        trace::AttentionTensor t(L, H, S);
        for (int l = 0; l < L; ++l)
            for (int h = 0; h < H; ++h)
                for (int i = 0; i < S; ++i)
                    for (int j = 0; j < S; ++j) t(l, h, i, j) = static_cast<float>(m(l, h, i, j));
        return t;
    };

    trace::Trace t;
    t.model_id = model_id_for(cfg);
    t.num_layers = L;
    t.num_heads = H;
    t.seq_len = S;
    t.patch_rows = cfg.patch_rows;
    t.patch_cols = cfg.patch_cols;
    for (int p = 0; p < rec.num_patches; ++p) {
        trace::TokenRecord tok;
        tok.index = p;
        tok.patch = trace::PatchCoord{p / cfg.patch_cols, p % cfg.patch_cols};
        tok.text = "patch(" + std::to_string(tok.patch->row) + "," + std::to_string(tok.patch->col) + ")";
        tok.modality = trace::Modality::Image;
        t.tokens.push_back(std::move(tok));
    }
    const int first_gen = record.first_generated_index();
    for (int n = 0; n < static_cast<int>(rec.token_ids.size()); ++n) {
        trace::TokenRecord tok;
        tok.index = rec.num_patches + n;
        tok.text = "tok" + std::to_string(rec.token_ids[n]);
        tok.modality = tok.index >= first_gen ? trace::Modality::Generated : trace::Modality::TextPrompt;
        t.tokens.push_back(std::move(tok));
    }
    t.generated_indices = record.generated_indices();
    t.attention = to_f32(rec.attention);
    for (int g : t.generated_indices) {
        auto it = gradients.find(g);
        if (it == gradients.end())
            throw Error(ErrorCode::ShapeMismatch, "no gradient tensor for generated token " + std::to_string(g));
        t.gradients.emplace(g, to_f32(it->second));
    }
    if (gradients.size() != t.generated_indices.size())
        throw Error(ErrorCode::ShapeMismatch, "gradient tensors for non-generated positions");

    trace::ImageData img;
    img.width = image.pixels.width;
    img.height = image.pixels.height;
    img.png = encode_png(image.pixels);
    t.image = std::move(img);
    return t;
}

trace::Trace toy_pipeline(const ToyModel& model, std::span<const int> prompt, const SyntheticImage& image,
                          int max_new) {
    const auto record = generate_greedy(model, prompt, image, max_new);
    std::map<int, AttentionMaps> grads;
    for (int g : record.generated_indices()) grads.emplace(g, attention_gradients(model, record, g));
    return build_trace(model, record, grads, image);
}

}  // namespace lvlmlens::toy
