#include "periloom/predict.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "periloom/error.hpp"
#include "periloom/io.hpp"
#include "periloom/random.hpp"
#include "periloom/transformer.hpp"

namespace periloom::predict {

// ---------------------------------------------------------------------------
// Features

void FeatureMatrix::validate() const {
    if (data.size() != rows * cols)
        throw DataError("feature matrix holds " + std::to_string(data.size()) + " values, expected " +
                        std::to_string(rows) + " x " + std::to_string(cols));
    if (!ids.empty() && ids.size() != rows) throw DataError("feature matrix ids do not align with its rows");
    for (std::size_t i = 0; i < data.size(); ++i)
        if (!std::isfinite(data[i]))
            throw DataError("non-finite feature at row " + std::to_string(i / std::max<std::size_t>(cols, 1)) +
                            ", column " + std::to_string(i % std::max<std::size_t>(cols, 1)));
}

FeatureMatrix FeatureMatrix::subset(const std::vector<std::size_t>& r) const {
    FeatureMatrix out;
    out.rows = r.size();
    out.cols = cols;
    out.data.reserve(r.size() * cols);
    for (auto i : r) {
        if (i >= rows) throw InvariantError("feature subset row out of range");
        out.data.insert(out.data.end(), row(i), row(i) + cols);
        if (!ids.empty()) out.ids.push_back(ids[i]);
    }
    return out;
}

template <class T>
FeatureMatrix FeatureMatrix::from_flat(const std::vector<T>& flat, std::size_t cols, std::vector<std::string> ids) {
    if (cols == 0 || flat.size() % cols != 0) throw DataError("flat feature buffer is not a whole number of rows");
    FeatureMatrix m;
    m.cols = cols;
    m.rows = flat.size() / cols;
    m.data.assign(flat.begin(), flat.end());
    m.ids = std::move(ids);
    return m;
}

template FeatureMatrix FeatureMatrix::from_flat<float>(const std::vector<float>&, std::size_t, std::vector<std::string>);
template FeatureMatrix FeatureMatrix::from_flat<double>(const std::vector<double>&, std::size_t, std::vector<std::string>);

LabeledRows select_labeled(const FeatureMatrix& x, const std::vector<corpus::Label>& labels) {
    if (labels.size() != x.rows) throw DataError("label count does not match feature rows");
    LabeledRows out;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (!labels[i]) continue;
        const double v = *labels[i];
        if (v != 0.0 && v != 1.0) throw DataError("binary label must be 0 or 1, got " + std::to_string(v));
        out.rows.push_back(i);
        out.y.push_back(v == 1.0 ? 1 : 0);
    }
    out.x = x.subset(out.rows);
    return out;
}

double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

namespace {

/// -log p(y | margin z), computed without overflow.
double nll(double z, int y) { return std::max(z, 0.0) + std::log1p(std::exp(-std::fabs(z))) - (y ? z : 0.0); }

void check_training_set(const FeatureMatrix& x, const std::vector<int>& y) {
    x.validate();
    if (y.size() != x.rows) throw DataError("label count does not match feature rows");
    if (x.rows < 2) throw DataError("need at least two labeled rows to train a predictor");
    std::size_t pos = 0;
    for (int v : y) {
        if (v != 0 && v != 1) throw DataError("training labels must be 0/1");
        pos += static_cast<std::size_t>(v);
    }
    if (pos == 0 || pos == y.size()) throw DataError("training labels contain a single class");
}

/// Feature indices ordered by their training column contents
/// (lexicographic over rows). Split search and feature sampling follow this
/// order, so relabeling columns relabels the fitted model and nothing else.
std::vector<std::size_t> canonical_feature_order(const FeatureMatrix& x) {
    std::vector<std::size_t> order(x.cols);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        for (std::size_t i = 0; i < x.rows; ++i) {
            const double va = x.at(i, a), vb = x.at(i, b);
            if (va != vb) return va < vb;
        }
        return false;
    });
    return order;
}

}  // namespace

double logistic_loss(const std::vector<double>& margin, const std::vector<int>& y) {
    double s = 0;
    for (std::size_t i = 0; i < y.size(); ++i) s += nll(margin[i], y[i]);
    return y.empty() ? 0.0 : s / static_cast<double>(y.size());
}

// ---------------------------------------------------------------------------
// Trees

double Tree::predict(const double* x) const {
    int k = 0;
    while (nodes[static_cast<std::size_t>(k)].feature >= 0) {
        const auto& n = nodes[static_cast<std::size_t>(k)];
        k = x[n.feature] < n.threshold ? n.left : n.right;
    }
    return nodes[static_cast<std::size_t>(k)].value;
}

int Tree::depth() const {
    std::vector<int> d(nodes.size(), 0);
    int best = 0;
    for (std::size_t k = 0; k < nodes.size(); ++k) {  // children always follow their parent
        best = std::max(best, d[k]);
        if (nodes[k].feature >= 0) {
            d[static_cast<std::size_t>(nodes[k].left)] = d[k] + 1;
            d[static_cast<std::size_t>(nodes[k].right)] = d[k] + 1;
        }
    }
    return best;
}

std::size_t Tree::leaves() const {
    return static_cast<std::size_t>(std::count_if(nodes.begin(), nodes.end(), [](const TreeNode& n) { return n.feature < 0; }));
}

nlohmann::ordered_json Tree::to_json() const {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& n : nodes) {
        nlohmann::ordered_json j;
        if (n.feature >= 0) {
            j["feature"] = n.feature;
            j["threshold"] = n.threshold;
            j["left"] = n.left;
            j["right"] = n.right;
            j["gain"] = n.gain;
        } else {
            j["value"] = n.value;
        }
        j["cover"] = n.cover;
        arr.push_back(std::move(j));
    }
    return {{"nodes", std::move(arr)}};
}

Tree Tree::from_json(const nlohmann::json& j) {
    Tree t;
    for (const auto& jn : j.at("nodes")) {
        TreeNode n;
        if (jn.contains("feature")) {
            n.feature = jn.at("feature").get<int>();
            n.threshold = jn.at("threshold").get<double>();
            n.left = jn.at("left").get<int>();
            n.right = jn.at("right").get<int>();
            n.gain = jn.value("gain", 0.0);
        } else {
            n.value = jn.at("value").get<double>();
        }
        n.cover = jn.value("cover", 0.0);
        t.nodes.push_back(n);
    }
    const auto size = static_cast<int>(t.nodes.size());
    if (size == 0) throw tensor_io::FormatError("tree has no nodes");
    for (int k = 0; k < size; ++k) {
        const auto& n = t.nodes[static_cast<std::size_t>(k)];
        if (n.feature < 0) {
            if (!std::isfinite(n.value)) throw tensor_io::FormatError("tree leaf value is not finite");
            continue;
        }
        if (n.left <= k || n.right <= k || n.left >= size || n.right >= size || n.left == n.right)
            throw tensor_io::FormatError("tree node " + std::to_string(k) + " has invalid children");
    }
    return t;
}

// ---------------------------------------------------------------------------
// GBT

void GBTParams::validate() const {
    if (rounds < 0) throw ValidationError("gbt.rounds", "must be >= 0");
    if (max_depth < 1) throw ValidationError("gbt.max_depth", "must be >= 1");
    if (!(eta > 0.0 && eta <= 1.0)) throw ValidationError("gbt.eta", "must be in (0,1]");
    if (!(lambda >= 0.0)) throw ValidationError("gbt.lambda", "must be >= 0");
    if (!(gamma >= 0.0)) throw ValidationError("gbt.gamma", "must be >= 0");
    if (!(min_child_weight >= 0.0)) throw ValidationError("gbt.min_child_weight", "must be >= 0");
}

nlohmann::ordered_json GBTParams::to_json() const {
    return {{"rounds", rounds}, {"max_depth", max_depth}, {"eta", eta},
            {"lambda", lambda}, {"gamma", gamma},         {"min_child_weight", min_child_weight}};
}

namespace {

template <class P>
void read_field(const nlohmann::json& j, const char* prefix, const char* key, P& out) {
    if (!j.contains(key)) return;
    try {
        j.at(key).get_to(out);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string(prefix) + key, e.what());
    }
}

}  // namespace

GBTParams GBTParams::from_json(const nlohmann::json& j) {
    GBTParams p;
    read_field(j, "gbt.", "rounds", p.rounds);
    read_field(j, "gbt.", "max_depth", p.max_depth);
    read_field(j, "gbt.", "eta", p.eta);
    read_field(j, "gbt.", "lambda", p.lambda);
    read_field(j, "gbt.", "gamma", p.gamma);
    read_field(j, "gbt.", "min_child_weight", p.min_child_weight);
    return p;
}

double split_gain(double gl, double hl, double gr, double hr, double lambda, double gamma) {
    const double g = gl + gr, h = hl + hr;
    return 0.5 * (gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - g * g / (h + lambda)) - gamma;
}

double leaf_weight(double g, double h, double lambda) { return -g / (h + lambda); }

double GBTModel::margin(const double* x) const {
    double m = base_score;
    for (const auto& t : trees) m += hp.eta * t.predict(x);
    return m;
}

namespace {

struct NodeStats {
    double g = 0, h = 0;
};

struct SplitCandidate {
    double gain = 0.0;  // only strictly positive gains are kept
    int feature = -1;
    double threshold = 0.0;
};

/// Threshold strictly above lo and at most hi, so x < t separates them.
double between(double lo, double hi) {
    const double mid = lo + (hi - lo) / 2.0;
    return mid > lo ? mid : hi;
}

Tree fit_gbt_tree(const FeatureMatrix& x, const std::vector<std::vector<std::size_t>>& sorted,
                  const std::vector<std::size_t>& features, const std::vector<double>& g,
                  const std::vector<double>& h, const GBTParams& hp, std::vector<int>& pos) {
    const std::size_t n = x.rows;
    Tree tree;
    tree.nodes.emplace_back();
    std::vector<NodeStats> stats(1);
    for (std::size_t i = 0; i < n; ++i) {
        stats[0].g += g[i];
        stats[0].h += h[i];
    }
    std::fill(pos.begin(), pos.end(), 0);
    std::vector<int> active = {0};

    for (int depth = 0; depth < hp.max_depth && !active.empty(); ++depth) {
        // slot[k] = index into `active` for node k, -1 when not being split
        std::vector<int> slot(tree.nodes.size(), -1);
        for (std::size_t s = 0; s < active.size(); ++s) slot[static_cast<std::size_t>(active[s])] = static_cast<int>(s);
        std::vector<SplitCandidate> best(active.size());

        struct Scan {
            double gl = 0, hl = 0, last = 0;
            bool seen = false;
        };
        for (std::size_t f : features) {
            std::vector<Scan> scan(active.size());
            for (auto i : sorted[f]) {
                const int s = slot[static_cast<std::size_t>(pos[i])];
                if (s < 0) continue;
                auto& st = scan[static_cast<std::size_t>(s)];
                const double v = x.at(i, f);
                if (st.seen && v > st.last) {
                    const auto& tot = stats[static_cast<std::size_t>(active[static_cast<std::size_t>(s)])];
                    const double gr = tot.g - st.gl, hr = tot.h - st.hl;
                    if (st.hl >= hp.min_child_weight && hr >= hp.min_child_weight) {
                        const double gain = split_gain(st.gl, st.hl, gr, hr, hp.lambda, hp.gamma);
                        auto& b = best[static_cast<std::size_t>(s)];
                        if (gain > b.gain) b = {gain, static_cast<int>(f), between(st.last, v)};
                    }
                }
                st.gl += g[i];
                st.hl += h[i];
                st.last = v;
                st.seen = true;
            }
        }

        std::vector<int> next;
        for (std::size_t s = 0; s < active.size(); ++s) {
            const auto& b = best[s];
            if (b.feature < 0) continue;
            const int k = active[s];
            const int l = static_cast<int>(tree.nodes.size());
            tree.nodes.emplace_back();
            tree.nodes.emplace_back();
            stats.emplace_back();
            stats.emplace_back();
            auto& node = tree.nodes[static_cast<std::size_t>(k)];
            node.feature = b.feature;
            node.threshold = b.threshold;
            node.left = l;
            node.right = l + 1;
            node.gain = b.gain;
            next.push_back(l);
            next.push_back(l + 1);
        }
        if (next.empty()) break;
        for (std::size_t i = 0; i < n; ++i) {
            const auto& node = tree.nodes[static_cast<std::size_t>(pos[i])];
            if (node.feature < 0) continue;
            pos[i] = x.at(i, static_cast<std::size_t>(node.feature)) < node.threshold ? node.left : node.right;
            auto& st = stats[static_cast<std::size_t>(pos[i])];
            st.g += g[i];
            st.h += h[i];
        }
        active = std::move(next);
    }
    for (std::size_t k = 0; k < tree.nodes.size(); ++k) {
        tree.nodes[k].cover = stats[k].h;
        if (tree.nodes[k].feature < 0) tree.nodes[k].value = leaf_weight(stats[k].g, stats[k].h, hp.lambda);
    }
    return tree;
}

}  // namespace

GBTModel train_gbt(const FeatureMatrix& x, const std::vector<int>& y, const GBTParams& hp) {
    hp.validate();
    check_training_set(x, y);
    const std::size_t n = x.rows;
    GBTModel m;
    m.hp = hp;
    m.n_features = x.cols;
    const double prior = static_cast<double>(std::accumulate(y.begin(), y.end(), 0)) / static_cast<double>(n);
    m.base_score = std::log(prior / (1.0 - prior));

    std::vector<std::vector<std::size_t>> sorted(x.cols, std::vector<std::size_t>(n));
    for (std::size_t f = 0; f < x.cols; ++f) {
        auto& o = sorted[f];
        std::iota(o.begin(), o.end(), std::size_t{0});
        std::stable_sort(o.begin(), o.end(), [&](std::size_t a, std::size_t b) { return x.at(a, f) < x.at(b, f); });
    }

    const auto features = canonical_feature_order(x);
    std::vector<double> margin(n, m.base_score), g(n), h(n);
    std::vector<int> pos(n, 0);
    m.train_loss.push_back(logistic_loss(margin, y));
    for (int r = 0; r < hp.rounds; ++r) {
        for (std::size_t i = 0; i < n; ++i) {
            const double p = sigmoid(margin[i]);
            g[i] = p - y[i];
            h[i] = p * (1.0 - p);
        }
        auto tree = fit_gbt_tree(x, sorted, features, g, h, hp, pos);
        for (std::size_t i = 0; i < n; ++i) margin[i] += hp.eta * tree.nodes[static_cast<std::size_t>(pos[i])].value;
        m.trees.push_back(std::move(tree));
        m.train_loss.push_back(logistic_loss(margin, y));
    }
    return m;
}

// ---------------------------------------------------------------------------
// Logistic regression

void LogRegParams::validate() const {
    if (!(l2 >= 0.0) || !std::isfinite(l2)) throw ValidationError("logreg.l2", "must be >= 0");
    if (!(tolerance > 0.0)) throw ValidationError("logreg.tolerance", "must be > 0");
    if (max_iter < 1) throw ValidationError("logreg.max_iter", "must be >= 1");
}

nlohmann::ordered_json LogRegParams::to_json() const {
    return {{"l2", l2}, {"standardize", standardize}, {"tolerance", tolerance}, {"max_iter", max_iter}};
}

LogRegParams LogRegParams::from_json(const nlohmann::json& j) {
    LogRegParams p;
    read_field(j, "logreg.", "l2", p.l2);
    read_field(j, "logreg.", "standardize", p.standardize);
    read_field(j, "logreg.", "tolerance", p.tolerance);
    read_field(j, "logreg.", "max_iter", p.max_iter);
    return p;
}

double LinearModel::margin(const double* x) const {
    double z = bias;
    for (std::size_t j = 0; j < weights.size(); ++j) z += weights[j] * ((x[j] - mean[j]) / scale[j]);
    return z;
}

namespace {

/// Cholesky solve of the SPD system a x = b (a is k x k, overwritten). False
/// when a is not numerically positive definite.
bool cholesky_solve(std::vector<double>& a, std::vector<double>& b, std::size_t k) {
    for (std::size_t j = 0; j < k; ++j) {
        double s = a[j * k + j];
        for (std::size_t p = 0; p < j; ++p) s -= a[j * k + p] * a[j * k + p];
        if (!(s > 0.0)) return false;
        const double d = std::sqrt(s);
        a[j * k + j] = d;
        for (std::size_t i = j + 1; i < k; ++i) {
            double t = a[i * k + j];
            for (std::size_t p = 0; p < j; ++p) t -= a[i * k + p] * a[j * k + p];
            a[i * k + j] = t / d;
        }
    }
    for (std::size_t i = 0; i < k; ++i) {
        double t = b[i];
        for (std::size_t p = 0; p < i; ++p) t -= a[i * k + p] * b[p];
        b[i] = t / a[i * k + i];
    }
    for (std::size_t i = k; i-- > 0;) {
        double t = b[i];
        for (std::size_t p = i + 1; p < k; ++p) t -= a[p * k + i] * b[p];
        b[i] = t / a[i * k + i];
    }
    return true;
}

}  // namespace

LinearModel train_logreg(const FeatureMatrix& x, const std::vector<int>& y, const LogRegParams& hp) {
    hp.validate();
    check_training_set(x, y);
    const std::size_t n = x.rows, d = x.cols, k = d + 1;
    LinearModel m;
    m.hp = hp;
    m.mean.assign(d, 0.0);
    m.scale.assign(d, 1.0);
    if (hp.standardize) {
        for (std::size_t j = 0; j < d; ++j) {
            double s = 0;
            for (std::size_t i = 0; i < n; ++i) s += x.at(i, j);
            m.mean[j] = s / static_cast<double>(n);
            double v = 0;
            for (std::size_t i = 0; i < n; ++i) v += (x.at(i, j) - m.mean[j]) * (x.at(i, j) - m.mean[j]);
            const double sd = std::sqrt(v / static_cast<double>(n));
            m.scale[j] = sd > 0.0 ? sd : 1.0;
        }
    }
    std::vector<double> z(n * d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) z[i * d + j] = (x.at(i, j) - m.mean[j]) / m.scale[j];

    // theta = [w, b]; objective = sum_i nll + l2/2 |w|^2
    std::vector<double> theta(k, 0.0);
    auto margins = [&](const std::vector<double>& th) {
        std::vector<double> out(n, th[d]);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) out[i] += th[j] * z[i * d + j];
        return out;
    };
    auto objective = [&](const std::vector<double>& th, const std::vector<double>& mg) {
        double f = 0;
        for (std::size_t i = 0; i < n; ++i) f += nll(mg[i], y[i]);
        for (std::size_t j = 0; j < d; ++j) f += 0.5 * hp.l2 * th[j] * th[j];
        return f;
    };

    auto mg = margins(theta);
    double f = objective(theta, mg);
    const double stop = hp.tolerance * static_cast<double>(n);
    std::vector<double> grad(k), hess(k * k), dir(k), trial(k);
    for (int it = 0; it < hp.max_iter; ++it) {
        std::fill(grad.begin(), grad.end(), 0.0);
        std::fill(hess.begin(), hess.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const double p = sigmoid(mg[i]);
            const double r = p - y[i], w = p * (1.0 - p);
            const double* zi = z.data() + i * d;
            for (std::size_t a = 0; a < d; ++a) {
                grad[a] += r * zi[a];
                for (std::size_t b = 0; b <= a; ++b) hess[a * k + b] += w * zi[a] * zi[b];
                hess[d * k + a] += w * zi[a];
            }
            grad[d] += r;
            hess[d * k + d] += w;
        }
        for (std::size_t a = 0; a < d; ++a) {
            grad[a] += hp.l2 * theta[a];
            hess[a * k + a] += hp.l2;
        }
        double gn = 0;
        for (double v : grad) gn += v * v;
        m.grad_norm = std::sqrt(gn);
        m.iterations = it;
        if (m.grad_norm <= stop) break;

        // Newton direction with a small ridge for saturated or separable data;
        // plain gradient descent if the system is still not positive definite.
        for (std::size_t a = 0; a < k; ++a)
            for (std::size_t b = a + 1; b < k; ++b) hess[a * k + b] = hess[b * k + a];
        for (std::size_t a = 0; a < k; ++a) hess[a * k + a] += 1e-10 * static_cast<double>(n);
        for (std::size_t a = 0; a < k; ++a) dir[a] = -grad[a];
        if (!cholesky_solve(hess, dir, k))
            for (std::size_t a = 0; a < k; ++a) dir[a] = -grad[a] / static_cast<double>(n);
        double slope = 0;
        for (std::size_t a = 0; a < k; ++a) slope += grad[a] * dir[a];

        // Armijo backtracking
        double t = 1.0;
        bool moved = false;
        for (int ls = 0; ls < 60; ++ls, t *= 0.5) {
            for (std::size_t a = 0; a < k; ++a) trial[a] = theta[a] + t * dir[a];
            auto tm = margins(trial);
            const double ft = objective(trial, tm);
            if (ft <= f + 1e-4 * t * slope) {
                theta = trial;
                mg = std::move(tm);
                f = ft;
                moved = true;
                break;
            }
        }
        m.iterations = it + 1;
        if (!moved) break;  // no further decrease representable
    }
    m.weights.assign(theta.begin(), theta.begin() + static_cast<std::ptrdiff_t>(d));
    m.bias = theta[d];
    for (double v : theta)
        if (!std::isfinite(v)) throw InvariantError("logistic regression produced non-finite weights");
    return m;
}

// ---------------------------------------------------------------------------
// Random forest

void ForestParams::validate() const {
    if (trees < 1) throw ValidationError("rf.trees", "must be >= 1");
    if (max_depth < 0) throw ValidationError("rf.max_depth", "must be >= 0 (0 = unlimited)");
    if (min_samples_leaf < 1) throw ValidationError("rf.min_samples_leaf", "must be >= 1");
    if (max_features < 0) throw ValidationError("rf.max_features", "must be >= 0 (0 = sqrt(d))");
}

nlohmann::ordered_json ForestParams::to_json() const {
    return {{"trees", trees},         {"max_depth", max_depth}, {"min_samples_leaf", min_samples_leaf},
            {"max_features", max_features}, {"bootstrap", bootstrap}, {"seed", seed}};
}

ForestParams ForestParams::from_json(const nlohmann::json& j) {
    ForestParams p;
    read_field(j, "rf.", "trees", p.trees);
    read_field(j, "rf.", "max_depth", p.max_depth);
    read_field(j, "rf.", "min_samples_leaf", p.min_samples_leaf);
    read_field(j, "rf.", "max_features", p.max_features);
    read_field(j, "rf.", "bootstrap", p.bootstrap);
    read_field(j, "rf.", "seed", p.seed);
    return p;
}

double ForestModel::probability(const double* x) const {
    double s = 0;
    for (const auto& t : trees) s += t.predict(x);
    return s / static_cast<double>(trees.size());
}

namespace {

struct GiniSplit {
    double score = std::numeric_limits<double>::infinity();  // weighted child impurity (lower is better)
    int feature = -1;
    double threshold = 0;
};

double gini_mass(double pos, double n) {
    // n * gini = n * (1 - p^2 - q^2) = 2 pos (n - pos) / n
    return n > 0 ? 2.0 * pos * (n - pos) / n : 0.0;
}

void best_gini_split(const FeatureMatrix& x, const std::vector<int>& y, const std::vector<std::size_t>& rows,
                     std::size_t f, int min_leaf, std::vector<std::size_t>& scratch, GiniSplit& best) {
    scratch = rows;
    std::stable_sort(scratch.begin(), scratch.end(), [&](std::size_t a, std::size_t b) { return x.at(a, f) < x.at(b, f); });
    double total_pos = 0;
    for (auto i : scratch) total_pos += y[i];
    const double n = static_cast<double>(scratch.size());
    double left_pos = 0;
    for (std::size_t k = 0; k + 1 < scratch.size(); ++k) {
        left_pos += y[scratch[k]];
        const double lo = x.at(scratch[k], f), hi = x.at(scratch[k + 1], f);
        if (!(hi > lo)) continue;
        const double nl = static_cast<double>(k + 1), nr = n - nl;
        if (nl < min_leaf || nr < min_leaf) continue;
        const double score = gini_mass(left_pos, nl) + gini_mass(total_pos - left_pos, nr);
        if (score < best.score) best = {score, static_cast<int>(f), between(lo, hi)};
    }
}

Tree fit_cart(const FeatureMatrix& x, const std::vector<int>& y, std::vector<std::size_t> sample,
              const std::vector<std::size_t>& canonical, const ForestParams& hp, std::size_t mtry, Rng& rng) {
    Tree tree;
    struct Work {
        int node;
        int depth;
        std::vector<std::size_t> rows;
    };
    tree.nodes.emplace_back();
    std::vector<Work> stack;
    stack.push_back({0, 0, std::move(sample)});
    std::vector<std::size_t> features, scratch;
    while (!stack.empty()) {
        Work w = std::move(stack.back());
        stack.pop_back();
        double pos = 0;
        for (auto i : w.rows) pos += y[i];
        const double n = static_cast<double>(w.rows.size());
        auto& node = tree.nodes[static_cast<std::size_t>(w.node)];
        node.value = pos / n;
        node.cover = n;
        const bool pure = pos == 0.0 || pos == n;
        if (pure || (hp.max_depth > 0 && w.depth >= hp.max_depth) || n < 2.0 * hp.min_samples_leaf) continue;

        // Draw features without replacement; past the first mtry, keep drawing
        // only until some feature admits a split.
        features = canonical;
        GiniSplit best;
        for (std::size_t k = 0; k < features.size(); ++k) {
            if (k >= mtry && best.feature >= 0) break;
            const std::size_t pick = k + rng.below(features.size() - k);
            std::swap(features[k], features[pick]);
            best_gini_split(x, y, w.rows, features[k], hp.min_samples_leaf, scratch, best);
        }
        if (best.feature < 0) continue;

        std::vector<std::size_t> left, right;
        for (auto i : w.rows) (x.at(i, static_cast<std::size_t>(best.feature)) < best.threshold ? left : right).push_back(i);
        const int l = static_cast<int>(tree.nodes.size());
        tree.nodes.emplace_back();
        tree.nodes.emplace_back();
        auto& parent = tree.nodes[static_cast<std::size_t>(w.node)];
        parent.feature = best.feature;
        parent.threshold = best.threshold;
        parent.left = l;
        parent.right = l + 1;
        parent.gain = gini_mass(pos, n) - best.score;
        // right pushed first so the left subtree is built first
        stack.push_back({l + 1, w.depth + 1, std::move(right)});
        stack.push_back({l, w.depth + 1, std::move(left)});
    }
    return tree;
}

}  // namespace

ForestModel train_rf(const FeatureMatrix& x, const std::vector<int>& y, const ForestParams& hp) {
    hp.validate();
    check_training_set(x, y);
    ForestModel m;
    m.hp = hp;
    m.n_features = x.cols;
    const std::size_t mtry =
        hp.max_features > 0
            ? std::min<std::size_t>(static_cast<std::size_t>(hp.max_features), x.cols)
            : std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(x.cols)))));
    const auto canonical = canonical_feature_order(x);
    for (int t = 0; t < hp.trees; ++t) {
        Rng rng(mix_seed(hp.seed, {0xf0, static_cast<std::uint64_t>(t)}));
        std::vector<std::size_t> sample(x.rows);
        if (hp.bootstrap)
            for (auto& s : sample) s = rng.below(x.rows);
        else
            std::iota(sample.begin(), sample.end(), std::size_t{0});
        m.trees.push_back(fit_cart(x, y, std::move(sample), canonical, hp, mtry, rng));
    }
    return m;
}

// ---------------------------------------------------------------------------
// Predictor

const char* to_string(PredictorKind k) {
    switch (k) {
        case PredictorKind::GBT: return "gbt";
        case PredictorKind::LogReg: return "logreg";
        case PredictorKind::RandomForest: return "rf";
    }
    return "gbt";
}

PredictorKind predictor_from_string(const std::string& s) {
    if (s == "gbt" || s == "xgboost") return PredictorKind::GBT;
    if (s == "logreg") return PredictorKind::LogReg;
    if (s == "rf") return PredictorKind::RandomForest;
    throw ValidationError("predictor", "unknown predictor '" + s + "' (expected gbt, logreg, rf)");
}

nlohmann::ordered_json PredictorParams::to_json() const {
    return {{"kind", to_string(kind)}, {"gbt", gbt.to_json()}, {"logreg", logreg.to_json()}, {"rf", rf.to_json()}};
}

PredictorParams PredictorParams::from_json(const nlohmann::json& j) {
    PredictorParams p;
    if (j.contains("kind")) p.kind = predictor_from_string(j.at("kind").get<std::string>());
    if (j.contains("gbt")) p.gbt = GBTParams::from_json(j.at("gbt"));
    if (j.contains("logreg")) p.logreg = LogRegParams::from_json(j.at("logreg"));
    if (j.contains("rf")) p.rf = ForestParams::from_json(j.at("rf"));
    return p;
}

PredictorKind Predictor::kind() const {
    if (gbt()) return PredictorKind::GBT;
    if (linear()) return PredictorKind::LogReg;
    return PredictorKind::RandomForest;
}

std::size_t Predictor::n_features() const {
    if (auto* g = gbt()) return g->n_features;
    if (auto* l = linear()) return l->weights.size();
    return forest()->n_features;
}

std::vector<double> Predictor::predict_proba(const FeatureMatrix& x) const {
    x.validate();
    if (x.cols != n_features())
        throw CompatibilityError("predictor expects " + std::to_string(n_features()) + " features, got " +
                                 std::to_string(x.cols));
    std::vector<double> out(x.rows);
    for (std::size_t i = 0; i < x.rows; ++i) {
        if (auto* g = gbt()) out[i] = sigmoid(g->margin(x.row(i)));
        else if (auto* l = linear()) out[i] = sigmoid(l->margin(x.row(i)));
        else out[i] = forest()->probability(x.row(i));
    }
    return out;
}

Predictor fit(const PredictorParams& params, const FeatureMatrix& x, const std::vector<int>& y) {
    switch (params.kind) {
        case PredictorKind::GBT: return Predictor(train_gbt(x, y, params.gbt));
        case PredictorKind::LogReg: return Predictor(train_logreg(x, y, params.logreg));
        case PredictorKind::RandomForest: return Predictor(train_rf(x, y, params.rf));
    }
    throw InvariantError("unhandled predictor kind");
}

namespace {

nlohmann::ordered_json trees_json(const std::vector<Tree>& trees) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& t : trees) arr.push_back(t.to_json());
    return arr;
}

std::vector<Tree> trees_from(const nlohmann::json& j, std::size_t n_features) {
    std::vector<Tree> out;
    for (const auto& jt : j) {
        out.push_back(Tree::from_json(jt));
        for (const auto& n : out.back().nodes)
            if (n.feature >= static_cast<int>(n_features))
                throw tensor_io::ShapeError("tree splits on feature " + std::to_string(n.feature) + " of " +
                                            std::to_string(n_features));
    }
    return out;
}

}  // namespace

tensor_io::Container to_container(const Predictor& p) {
    tensor_io::Container c;
    c.meta["format"] = "periloom.predictor";
    c.meta["kind"] = to_string(p.kind());
    c.meta["n_features"] = p.n_features();
    if (auto* g = p.gbt()) {
        c.meta["hp"] = g->hp.to_json();
        c.meta["base_score"] = g->base_score;
        c.meta["train_loss"] = g->train_loss;
        c.meta["trees"] = trees_json(g->trees);
    } else if (auto* l = p.linear()) {
        c.meta["hp"] = l->hp.to_json();
        c.meta["bias"] = l->bias;
        c.meta["iterations"] = l->iterations;
        c.meta["grad_norm"] = l->grad_norm;
        const auto d = static_cast<std::int64_t>(l->weights.size());
        c.add<double>("weights", {d}, l->weights);
        c.add<double>("mean", {d}, l->mean);
        c.add<double>("scale", {d}, l->scale);
    } else {
        const auto* f = p.forest();
        c.meta["hp"] = f->hp.to_json();
        c.meta["trees"] = trees_json(f->trees);
    }
    return c;
}

Predictor from_container(const tensor_io::Container& c) {
    if (c.meta.value("format", std::string()) != "periloom.predictor")
        throw tensor_io::FormatError("container does not hold a predictor");
    try {
        const auto kind = predictor_from_string(c.meta.at("kind").get<std::string>());
        const auto nf = c.meta.at("n_features").get<std::size_t>();
        switch (kind) {
            case PredictorKind::GBT: {
                GBTModel g;
                g.hp = GBTParams::from_json(c.meta.at("hp"));
                g.n_features = nf;
                g.base_score = c.meta.at("base_score").get<double>();
                g.train_loss = c.meta.value("train_loss", std::vector<double>{});
                g.trees = trees_from(c.meta.at("trees"), nf);
                return Predictor(std::move(g));
            }
            case PredictorKind::LogReg: {
                LinearModel l;
                l.hp = LogRegParams::from_json(c.meta.at("hp"));
                l.bias = c.meta.at("bias").get<double>();
                l.iterations = c.meta.value("iterations", 0);
                l.grad_norm = c.meta.value("grad_norm", 0.0);
                const auto d = static_cast<std::int64_t>(nf);
                l.weights = c.get<double>("weights", {d});
                l.mean = c.get<double>("mean", {d});
                l.scale = c.get<double>("scale", {d});
                return Predictor(std::move(l));
            }
            case PredictorKind::RandomForest: {
                ForestModel f;
                f.hp = ForestParams::from_json(c.meta.at("hp"));
                f.n_features = nf;
                f.trees = trees_from(c.meta.at("trees"), nf);
                if (f.trees.empty()) throw tensor_io::FormatError("forest has no trees");
                return Predictor(std::move(f));
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw tensor_io::FormatError(std::string("predictor header: ") + e.what());
    }
    throw InvariantError("unhandled predictor kind");
}

void save_predictor(const Predictor& p, const std::filesystem::path& path) { to_container(p).save(path); }

Predictor load_predictor(const std::filesystem::path& path) { return from_container(tensor_io::Container::load(path)); }

// ---------------------------------------------------------------------------
// Head path

template <class T>
std::vector<double> head_proba(const finetune::FineTunedModel<T>& model, const std::string& task,
                               const std::vector<std::string>& texts, std::size_t batch_size) {
    const auto* head = model.head(task);
    if (!head) throw CompatibilityError("model has no head for task '" + task + "'");
    const auto emb = transformer::extract_embeddings(model.body, model.vocab, texts, batch_size);
    const auto out = finetune::head_forward(*head, emb.data(), texts.size());
    const auto pred = finetune::head_predict(*head, out);
    const auto k = static_cast<std::size_t>(head->out_dim());
    std::vector<double> p(texts.size());
    for (std::size_t i = 0; i < texts.size(); ++i) {
        // Multi-class heads report the mass outside the reference class 0.
        p[i] = head->kind == corpus::TaskKind::MultiClass ? 1.0 - static_cast<double>(pred[i * k])
                                                          : static_cast<double>(pred[i * k]);
    }
    return p;
}

template std::vector<double> head_proba<float>(const finetune::FineTunedModel<float>&, const std::string&,
                                               const std::vector<std::string>&, std::size_t);
template std::vector<double> head_proba<double>(const finetune::FineTunedModel<double>&, const std::string&,
                                                const std::vector<std::string>&, std::size_t);

}  // namespace periloom::predict
