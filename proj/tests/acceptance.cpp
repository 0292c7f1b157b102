// Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "pointlabel/pointlabel.hpp"
#include "synthetic.hpp"

using namespace pointlabel;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

Matrix<double> random_features(std::mt19937_64& rng, std::size_t n, std::size_t width = 9) {
    std::uniform_real_distribution<double> u(-1, 1);
    Matrix<double> x(n, width);
    for (auto& v : x.values()) v = u(rng);
    return x;
}

// ---------------------------------------------------------------------------
// 1. Gradient oracle

std::vector<std::vector<bool>> relu_masks(const ForwardTrace<double>& tr) {
    std::vector<std::vector<bool>> out;
    for (const auto& lt : tr.layers) {
        std::vector<bool> m;
        for (double v : lt.output.values()) m.push_back(v > 0);
        out.push_back(std::move(m));
    }
    return out;
}

Outcome gradient_oracle() {
    const auto t0 = std::chrono::steady_clock::now();
    Rng prng(101);
    auto params = init_params<double>(Architecture::toy(), prng);
    std::mt19937_64 rng(101);
    const auto x = random_features(rng, 16);
    std::vector<int> labels(16);
    for (auto& l : labels) l = static_cast<int>(rng() % 3);

    const auto base = forward(x, params, Mode::Train);
    const auto base_masks = relu_masks(base);
    auto grads = backward(base, labels, params);

    const double delta = 1e-3, tol = 1e-4;
    // Central differences carry ~1e-13 of round-off at this step size; gradients
    // below 1e-8 are compared in absolute terms against that floor.
    const double floor = 1e-8;
    double worst = 0;
    std::string worst_name;
    std::size_t checked = 0, failed = 0, kinks = 0, smooth_failed = 0;
    double worst_smooth = 0, worst_fine = 0;
    // Round-off at the fine step is ~1e-10, so its floor is raised accordingly.
    const double fine = 1e-5, fine_floor = 1e-6;
    auto loss_at = [&](NetworkParams<double> q, bool* same_path) {
        const auto tr = forward(x, q, Mode::Train);
        *same_path = relu_masks(tr) == base_masks && tr.argmax_rows == base.argmax_rows;
        return cross_entropy(tr.probs, labels);
    };
    for_each_learnable(params, grads, [&](const std::string& name, Matrix<double>& p, Matrix<double>& g) {
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double keep = p.values()[i];
            p.values()[i] = keep + delta;
            bool same_plus = true, same_minus = true;
            const double lp = loss_at(params, &same_plus);
            p.values()[i] = keep - delta;
            const double lm = loss_at(params, &same_minus);
            p.values()[i] = keep;
            const double fd = (lp - lm) / (2 * delta);
            const double a = g.values()[i];
            // Diagnostic only: the same comparison at a step small enough to stay on one linear piece.
            p.values()[i] = keep + fine;
            bool fine_plus = true, fine_minus = true;
            const double fp = loss_at(params, &fine_plus);
            p.values()[i] = keep - fine;
            const double fm = loss_at(params, &fine_minus);
            p.values()[i] = keep;
            const double fd_fine = (fp - fm) / (2 * fine);
            if (fine_plus && fine_minus) worst_fine = std::max(worst_fine, std::abs(a - fd_fine) / std::max({std::abs(a), std::abs(fd_fine), fine_floor}));
            const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), floor});
            ++checked;
            const bool smooth = same_plus && same_minus;
            kinks += !smooth;
            if (rel > tol) ++failed;
            if (smooth) {
                smooth_failed += rel > tol;
                worst_smooth = std::max(worst_smooth, rel);
            }
            if (rel > worst) {
                worst = rel;
                worst_name = name + "[" + std::to_string(i) + "]";
            }
        }
    });
    const double secs = seconds_since(t0);
    return {failed == 0 && secs < 30,
            fmt("%zu parameters, %zu over 1e-4 (worst rel %.3g at %s); %zu of the +-delta steps cross a ReLU or "
                "max-pool switch, the other %zu have %zu over 1e-4 (worst rel %.3g); at delta 1e-5 without a switch the worst rel is %.3g; %.2fs",
                checked, failed, worst, worst_name.c_str(), kinks, checked - kinks, smooth_failed, worst_smooth,
                worst_fine, secs)};
}

// ---------------------------------------------------------------------------
// 2. Permutation invariance

Outcome permutation_invariance() {
    Rng prng(202);
    auto params = init_params<float>(Architecture{}, prng);
    std::mt19937_64 rng(202);
    // Non-trivial running statistics.
    for (int k = 0; k < 3; ++k) forward(matrix_cast<float>(random_features(rng, 64)), params, Mode::Train, false);

    std::size_t clouds = 0, mismatched = 0;
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 1 + rng() % 96;
        const auto x = matrix_cast<float>(random_features(rng, n));
        std::vector<std::size_t> perm(n);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        Matrix<float> xp(n, 9);
        for (std::size_t i = 0; i < n; ++i) std::copy(x.row(perm[i]).begin(), x.row(perm[i]).end(), xp.row(i).begin());
        const auto a = forward(x, params, Mode::Eval, false);
        const auto b = forward(xp, params, Mode::Eval, false);
        bool same = a.global == b.global;
        for (std::size_t i = 0; i < n && same; ++i)
            same = std::equal(b.probs.row(i).begin(), b.probs.row(i).end(), a.probs.row(perm[i]).begin());
        ++clouds;
        mismatched += !same;
    }
    return {mismatched == 0, fmt("%zu clouds, %zu with any non-identical probability or global feature", clouds, mismatched)};
}

// ---------------------------------------------------------------------------
// 3. BN contract

Outcome bn_contract() {
    std::mt19937_64 rng(303);
    std::uniform_real_distribution<double> u(-5, 5);
    Layer<double> l;
    l.spec = {6, 6, true, Activation::None};
    l.weight = Matrix<double>(6, 6);
    for (auto& v : l.weight.values()) v = u(rng);
    l.bias = Matrix<double>(1, 6);
    l.gamma = Matrix<double>(1, 6, 1.0);
    l.beta = Matrix<double>(1, 6);
    l.running_mean = Matrix<double>(1, 6);
    l.running_var = Matrix<double>(1, 6, 1.0);
    Matrix<double> x(64, 6);
    for (auto& v : x.values()) v = 4 * u(rng) + 2;

    LayerTrace<double> tr;
    pointwise_forward(x, l, Mode::Train, 1e-5, 0.1, &tr);
    const auto mean = reduce(tr.normalized, Axis::Rows, Reduction::Mean);
    const auto var = reduce(tr.normalized, Axis::Rows, Reduction::Var);
    double worst_mean = 0, worst_var = 0;
    for (std::size_t c = 0; c < 6; ++c) {
        worst_mean = std::max(worst_mean, std::abs(mean[c]));
        worst_var = std::max(worst_var, std::abs(var[c] - 1));
    }

    // Identity recovery in eval mode: statistics of s = xW + b, γ = √Var, β = E.
    const auto s = matmul(x, l.weight);
    const auto e = reduce(s, Axis::Rows, Reduction::Mean);
    const auto v = reduce(s, Axis::Rows, Reduction::Var);
    for (std::size_t c = 0; c < 6; ++c) {
        l.running_mean(0, c) = e[c];
        l.running_var(0, c) = v[c];
        l.gamma(0, c) = std::sqrt(v[c]);
        l.beta(0, c) = e[c];
    }
    const auto y = pointwise_forward(x, l, Mode::Eval);
    // Relative error per column, measured in the 2-norm over the batch.
    double worst_rel = 0;
    for (std::size_t c = 0; c < 6; ++c) {
        double err = 0, norm = 0;
        for (std::size_t i = 0; i < s.rows(); ++i) {
            err += (y(i, c) - s(i, c)) * (y(i, c) - s(i, c));
            norm += s(i, c) * s(i, c);
        }
        worst_rel = std::max(worst_rel, std::sqrt(err / norm));
    }
    return {worst_mean < 1e-4 && worst_var < 1e-3 && worst_rel < 1e-4,
            fmt("max |mean| %.3g, max |var-1| %.3g, identity recovery max rel %.3g", worst_mean, worst_var, worst_rel)};
}

// ---------------------------------------------------------------------------
// 4. Loss calibration

Outcome loss_calibration() {
    Rng prng(404);
    auto params = init_params<float>(Architecture{}, prng);
    auto& cls = params.layers.back();
    std::fill(cls.weight.values().begin(), cls.weight.values().end(), 0.0f);
    std::fill(cls.bias.values().begin(), cls.bias.values().end(), 0.0f);
    std::mt19937_64 rng(404);
    const auto x = matrix_cast<float>(random_features(rng, 50));
    const auto q = predict_probs(x, params);
    std::vector<int> labels(50);
    for (std::size_t i = 0; i < 50; ++i) labels[i] = static_cast<int>(i % 9);
    const double loss = cross_entropy(q, labels);
    const double err = std::abs(loss - std::log(9.0));
    return {err <= 1e-6, fmt("loss %.12f, ln 9 = %.12f, |diff| %.3g", loss, std::log(9.0), err)};
}

// ---------------------------------------------------------------------------
// 5. LR schedule

Outcome lr_schedule() {
    const TrainConfig cfg;
    std::size_t wrong = 0;
    for (std::size_t e = 0; e < 30; ++e) {
        const double expected = 0.001 * (1.0 - static_cast<double>(e) / 30.0);
        wrong += lr_at(e, cfg) != expected;
    }
    const bool mid = lr_at(15, cfg) == 0.0005;
    return {wrong == 0 && mid, fmt("%zu of 30 epochs differ; lr_at(15) = %.17g", wrong, lr_at(15, cfg))};
}

// ---------------------------------------------------------------------------
// 6. Overfit oracle

double label_accuracy(std::span<const int> pred, const PointCloud& cloud) {
    std::size_t ok = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == cloud.points[i].label;
    return static_cast<double>(ok) / static_cast<double>(pred.size());
}

Outcome overfit_oracle() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto train_scene = synth::three_class_scene({2000, 20, 20, 61});
    const auto held_out = synth::three_class_scene({2000, 20, 20, 62});
    const std::vector<ScaleConfig> scales{{10, 2, 512}};

    TrainConfig cfg;
    cfg.epoch_total = 50;
    cfg.patience = 50;
    cfg.batch_size = 4;
    cfg.seed = 6;
    Architecture arch;
    arch.classes = 3;
    Rng prng = derive_rng(cfg.seed, 0x1417);
    const TrainingSet data(train_scene, scales, cfg);
    const auto r = fit(data.source(), data.validation(), init_params<float>(arch, prng), cfg);

    const auto train_pred = predict(train_scene, r.best, scales);
    const auto held_pred = predict(held_out, r.best, scales);
    const double train_acc = label_accuracy(train_pred.labels, train_scene);
    const double held_acc = label_accuracy(held_pred.labels, held_out);
    const double secs = seconds_since(t0);
    return {train_acc >= 0.99 && held_acc >= 0.95 && r.history.size() <= 50 && secs < 600,
            fmt("train acc %.4f, held-out acc %.4f after %zu epochs (best %zu), %.1fs", train_acc, held_acc,
                r.history.size(), r.best_epoch, secs)};
}

// ---------------------------------------------------------------------------
// 7. Tiling oracle

Outcome tiling_oracle() {
    std::mt19937_64 rng(707);
    std::size_t points_checked = 0, uncovered = 0, membership_errors = 0, discard_errors = 0;
    for (int trial = 0; trial < 20; ++trial) {
        PointCloud c;
        const double w = 1 + 30 * std::uniform_real_distribution<double>(0, 1)(rng);
        const double d = 1 + 30 * std::uniform_real_distribution<double>(0, 1)(rng);
        std::uniform_real_distribution<double> ux(-w / 2, w / 2), uy(100, 100 + d);
        const std::size_t n = 50 + rng() % 1500;
        for (std::size_t i = 0; i < n; ++i) c.points.push_back({ux(rng), uy(rng), 0});
        // Integer grid points land exactly on footprint edges.
        for (int i = 0; i < 30; ++i) c.points.push_back({std::floor(ux(rng)), std::floor(uy(rng)), 0});
        for (const auto& s : default_scales()) {
            const auto all = tile_blocks(c, s.size, s.overlap, 0, 0);
            const auto kept = tile_blocks(c, s.size, s.overlap, 0);
            std::vector<std::size_t> hits(c.size(), 0);
            for (const auto& fp : all) {
                std::vector<std::size_t> brute;
                for (std::size_t i = 0; i < c.size(); ++i)
                    if (c.points[i].x >= fp.origin_x && c.points[i].x < fp.origin_x + s.size &&
                        c.points[i].y >= fp.origin_y && c.points[i].y < fp.origin_y + s.size)
                        brute.push_back(i);
                auto members = fp.members;
                std::sort(members.begin(), members.end());
                membership_errors += members != brute;
                for (auto i : members) ++hits[i];
            }
            for (auto h : hits) uncovered += h == 0;
            points_checked += c.size();
            std::size_t expected_kept = 0;
            for (const auto& fp : all) expected_kept += fp.members.size() >= 10;
            discard_errors += expected_kept != kept.size();
            for (const auto& fp : kept) discard_errors += fp.members.size() < 10;
        }
    }
    return {uncovered == 0 && membership_errors == 0 && discard_errors == 0,
            fmt("%zu point-scale pairs, %zu uncovered, %zu footprint membership mismatches, %zu discard errors",
                points_checked, uncovered, membership_errors, discard_errors)};
}

// ---------------------------------------------------------------------------
// 8. Metrics oracle

Outcome metrics_oracle() {
    const std::vector<int> truth{0, 0, 1, 1}, pred{0, 1, 1, 1};
    const auto r = evaluate(pred, truth, 2);
    const bool numbers = r.overall_accuracy == 0.75 && r.classes[0].f1 == 2.0 / 3.0 && r.classes[1].f1 == 0.8 &&
                         r.classes[0].precision == 1.0 && r.classes[0].recall == 0.5 &&
                         r.classes[1].precision == 2.0 / 3.0 && r.classes[1].recall == 1.0;
    std::ostringstream text;
    std::vector<int> nine(9);
    std::iota(nine.begin(), nine.end(), 0);
    write_report_text(text, evaluate(nine, nine, 9));
    std::vector<std::string> lines;
    std::istringstream in(text.str());
    for (std::string line; std::getline(in, line);) lines.push_back(line);
    // Header, nine class rows, then precision, recall and F1 rows.
    const bool layout = lines.size() >= 13 && lines[1].rfind("Powerline", 0) == 0 && lines[9].rfind("Tree", 0) == 0 &&
                        lines[10].rfind("Precision/Correctness", 0) == 0 &&
                        lines[11].rfind("Recall/Completeness", 0) == 0 && lines[12].rfind("F1 Score", 0) == 0;
    return {numbers && layout, fmt("OA %.17g, F1 %.17g / %.17g, table layout %s", r.overall_accuracy, r.classes[0].f1,
                                   r.classes[1].f1, layout ? "ok" : "wrong")};
}

// ---------------------------------------------------------------------------
// 9. Parameter count

Outcome parameter_count() {
    Rng prng(909);
    const auto n = init_params<float>(Architecture{}, prng).parameter_count();
    return {n >= 1'600'000 && n <= 2'200'000, fmt("%zu learnable parameters", n)};
}

// ---------------------------------------------------------------------------
// 10. Throughput

Outcome throughput() {
    // 412k points over 100 m x 100 m; one 10 m scale with no overlap and 4096
    // samples per block gives one eval-mode row per point on average.
    const auto cloud = synth::three_class_scene({412'000, 100, 100, 1010});
    Rng prng(1010);
    const auto params = init_params<float>(Architecture{}, prng);
    const std::vector<ScaleConfig> scales{{10, 0, 4096}};
    auto run = [&](std::size_t threads) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto r = predict(cloud, params, scales, {0, threads, 64}, NeighborSearch::Grid);
        return std::pair{seconds_since(t0), r.labels.size()};
    };
    const auto [single, n1] = run(1);
    const auto [eight, n8] = run(8);
    const unsigned cores = std::thread::hardware_concurrency();
    return {single <= 60 && eight <= 15 && n1 == cloud.size() && n8 == cloud.size(),
            fmt("%zu points: %.1fs single-threaded (limit 60s), %.1fs with 8 threads (limit 15s) on %u hardware threads",
                cloud.size(), single, eight, cores)};
}

// ---------------------------------------------------------------------------
// 11. Determinism of train runs

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

Outcome train_determinism() {
    const fs::path root = fs::temp_directory_path() / "pointlabel_acceptance_determinism";
    fs::remove_all(root);
    fs::create_directories(root / "scene");
    {
        std::ofstream out(root / "scene" / "points.txt");
        write_points(out, synth::three_class_scene({1500, 20, 20, 1111}));
    }
    const std::string cli = POINTLABEL_CLI;
    auto train = [&](const std::string& out) {
        const std::string cmd = "\"" + cli + "\" train --blocks \"" + (root / "scene").string() + "\" --out \"" +
                                (root / out).string() + "\" --epochs 2 --classes 3 --scales 10:2:256 --seed 5 > \"" +
                                (root / (out + ".log")).string() + "\" 2>&1";
        return std::system(cmd.c_str());
    };
    const int rc1 = train("run1"), rc2 = train("run2");
    if (rc1 != 0 || rc2 != 0) return {false, fmt("train exited with %d / %d", rc1, rc2)};
    const auto m1 = slurp(root / "run1" / "model.ptl"), m2 = slurp(root / "run2" / "model.ptl");
    const auto h1 = slurp(root / "run1" / "history.csv"), h2 = slurp(root / "run2" / "history.csv");
    const bool same = !m1.empty() && m1 == m2 && !h1.empty() && h1 == h2;
    fs::remove_all(root);
    return {same, fmt("checkpoint %zu bytes %s, history %zu bytes %s", m1.size(), m1 == m2 ? "identical" : "differs",
                      h1.size(), h1 == h2 ? "identical" : "differs")};
}

}  // namespace

int main(int argc, char** argv) {
    // Optional arguments select criteria by number.
    std::vector<std::size_t> only;
    for (int i = 1; i < argc; ++i) only.push_back(std::strtoul(argv[i], nullptr, 10));
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
        {"gradient oracle", gradient_oracle},
        {"permutation invariance", permutation_invariance},
        {"batch-norm contract", bn_contract},
        {"loss calibration", loss_calibration},
        {"learning-rate schedule", lr_schedule},
        {"overfit oracle", overfit_oracle},
        {"tiling oracle", tiling_oracle},
        {"metrics oracle", metrics_oracle},
        {"parameter count", parameter_count},
        {"throughput", throughput},
        {"train determinism", train_determinism},
    };
    int failures = 0;
    for (std::size_t k = 0; k < criteria.size(); ++k) {
        if (!only.empty() && std::find(only.begin(), only.end(), k + 1) == only.end()) continue;
        Outcome o;
        try {
            o = criteria[k].second();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        failures += !o.pass;
        std::printf("[%s] %2zu %s: %s\n", o.pass ? "PASS" : "FAIL", k + 1, criteria[k].first, o.detail.c_str());
        std::fflush(stdout);
    }
    std::printf("%d failed\n", failures);
    return failures ? 1 : 0;
}
