// pointlabel: preprocess, train, predict, evaluate, raster2points.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "pointlabel/pointlabel.hpp"

namespace fs = std::filesystem;
using namespace pointlabel;

namespace {

PointCloud read_points(const fs::path& path, const std::string& columns) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    const ColumnMap map = columns.empty() ? detect_schema(in) : parse_column_roles(columns);
    try {
        return parse_points(in, map);
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

std::ofstream create(const fs::path& path, std::ios::openmode mode = std::ios::out) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, mode);
    if (!out) throw IoError("cannot create " + path.string());
    return out;
}

void finish(std::ofstream& out, const fs::path& path) {
    out.flush();
    if (!out) throw IoError("failed writing " + path.string());
}

fs::path sidecar(const fs::path& out, const std::string& ext) {
    fs::path p = out;
    p += ext;
    return p;
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

// --- preprocess ------------------------------------------------------------

struct PreprocessArgs {
    std::string points, image, dtm, out, columns, scales;
    bool no_dtm = false;
    std::uint64_t seed = 0;
};

int run_preprocess(const PreprocessArgs& a) {
    Stopwatch clock;
    RunManifest m;
    m.command = "preprocess";
    m.seed = a.seed;
    if (!a.no_dtm && a.dtm.empty()) throw DomainError("--dtm is required unless --no-dtm is given");
    const auto scales = a.scales.empty() ? default_scales() : parse_scales(a.scales);

    PointCloud cloud = read_points(a.points, a.columns);
    m.add_input("points", a.points);
    if (cloud.empty()) throw DomainError(a.points + " holds no points");

    std::size_t clamped = 0;
    if (!a.image.empty()) {
        const Raster image = read_image(a.image);
        m.add_input("image", a.image);
        std::vector<std::size_t> outside;
        cloud = attribute_spectral(cloud, image, &outside);
        clamped = outside.size();
    } else if (!cloud.has_spectral) {
        throw DomainError("points carry no IR-R-G values and no --image was given");
    }

    std::size_t dropped = 0;
    if (!a.no_dtm) {
        const Raster dtm = read_ascii_grid(a.dtm);
        m.add_input("dtm", a.dtm);
        cloud = normalize_height(cloud, dtm, &dropped);
        if (cloud.empty()) throw DomainError("no point lies over valid DTM cells");
    }

    const fs::path dir(a.out);
    fs::create_directories(dir);
    {
        auto out = create(dir / "points.txt");
        write_points(out, cloud);
        finish(out, dir / "points.txt");
    }

    Container payload;
    auto index = create(dir / "blocks.txt");
    index << "# block scale origin_x origin_y size members rows\n";
    std::size_t k = 0;
    for (std::size_t s = 0; s < scales.size(); ++s) {
        for (auto& b : generate_blocks(cloud, scales[s], s, a.seed, false)) {
            const std::string name = "block." + std::to_string(k);
            payload.tensors.push_back({name + ".features", std::move(b.features)});
            if (!b.labels.empty()) {
                Matrix<float> labels(b.labels.size(), 1);
                for (std::size_t i = 0; i < b.labels.size(); ++i) labels(i, 0) = static_cast<float>(b.labels[i]);
                payload.tensors.push_back({name + ".labels", std::move(labels)});
            }
            char buf[160];
            std::snprintf(buf, sizeof buf, "%zu %zu %.6f %.6f %g %zu %zu\n", k, s, b.origin_x, b.origin_y, b.size,
                          b.member_count, b.parent_idx.size());
            index << buf;
            ++k;
        }
    }
    finish(index, dir / "blocks.txt");
    save_container(dir / "blocks.ptl", payload);

    m.config = {{"scales", format_scales(scales)},
                {"dtm", a.no_dtm ? "off" : "on"},
                {"points_kept", std::to_string(cloud.size())},
                {"points_dropped", std::to_string(dropped)},
                {"points_outside_image", std::to_string(clamped)},
                {"blocks", std::to_string(k)}};
    m.timings["total"] = clock.seconds();
    m.write(dir / "manifest.txt");
    std::cout << "preprocess: " << cloud.size() << " points (" << dropped << " dropped), " << k << " blocks\n";
    return 0;
}

// --- train -----------------------------------------------------------------

struct TrainArgs {
    std::string blocks, out, features = "both", scales, arch = "default";
    std::size_t epochs = 30, batch = 32, classes = 9, patience = 3, augment = 2;
    double lr = 0.001, val_fraction = 0.25;
    std::uint64_t seed = 0;
};

int run_train(const TrainArgs& a) {
    Stopwatch clock;
    RunManifest m;
    m.command = "train";
    m.seed = a.seed;

    TrainConfig cfg;
    cfg.lr_initial = a.lr;
    cfg.batch_size = a.batch;
    cfg.epoch_total = a.epochs;
    cfg.patience = a.patience;
    cfg.val_fraction = a.val_fraction;
    cfg.augment_copies = a.augment;
    cfg.seed = a.seed;
    cfg.features = parse_feature_set(a.features);
    cfg.validate();
    const auto scales = a.scales.empty() ? default_scales() : parse_scales(a.scales);

    const fs::path points = fs::path(a.blocks) / "points.txt";
    PointCloud cloud = read_points(points, "");
    m.add_input("points", points);
    if (!cloud.has_label) throw DomainError(points.string() + " carries no labels");
    if (!cloud.has_spectral) throw DomainError(points.string() + " carries no IR-R-G values");
    for (const auto& p : cloud.points)
        if (p.label < 0 || static_cast<std::size_t>(p.label) >= a.classes)
            throw DomainError("label " + std::to_string(p.label) + " outside [0, " + std::to_string(a.classes) + ")");

    const std::size_t width = feature_columns(cfg.features).size();
    Architecture arch = a.arch == "toy" ? Architecture::toy(width, a.classes) : Architecture{};
    if (a.arch != "toy" && a.arch != "default") throw DomainError("--arch must be default or toy");
    arch.input_width = width;
    arch.classes = a.classes;

    const TrainingSet data(std::move(cloud), scales, cfg);
    for (const auto& w : data.split().warnings) std::cerr << "warning: " << w << '\n';
    Rng init_rng = derive_rng(a.seed, 0x1417);
    const auto init = init_params<float>(arch, init_rng);

    const fs::path dir(a.out);
    fs::create_directories(dir);
    const fs::path model = dir / "model.ptl";
    const FitResult r = fit(data.source(), data.validation(), init, cfg,
                            [&](const NetworkParams<float>& best, const EpochRecord&) { save_checkpoint(model, best); });
    if (r.best_epoch == 0) save_checkpoint(model, r.best);
    {
        auto out = create(dir / "history.csv");
        write_history_csv(out, r.history);
        finish(out, dir / "history.csv");
    }

    m.config = {{"features", to_string(cfg.features)},
                {"arch", a.arch},
                {"classes", std::to_string(a.classes)},
                {"epochs", std::to_string(cfg.epoch_total)},
                {"lr", fmt_double(cfg.lr_initial)},
                {"batch", std::to_string(cfg.batch_size)},
                {"patience", std::to_string(cfg.patience)},
                {"val_fraction", fmt_double(cfg.val_fraction)},
                {"augment_copies", std::to_string(cfg.augment_copies)},
                {"scales", format_scales(scales)},
                {"parameters", std::to_string(init.parameter_count())},
                {"footprints", std::to_string(data.footprint_count())},
                {"train_blocks_per_epoch", std::to_string(data.balanced_train_count() * std::max<std::size_t>(cfg.augment_copies, 1))},
                {"val_blocks", std::to_string(data.validation().size())},
                {"best_epoch", std::to_string(r.best_epoch)},
                {"best_val_loss", fmt_double(r.best_val_loss)},
                {"stop_reason", r.stop_reason}};
    m.timings["total"] = clock.seconds();
    m.write(dir / "manifest.txt");
    std::cout << "train: " << r.history.size() << " epochs, best epoch " << r.best_epoch << " val_loss "
              << fmt_double(r.best_val_loss) << " (" << r.stop_reason << ")\n";
    return r.diverged ? 1 : 0;
}

// --- predict ---------------------------------------------------------------

struct PredictArgs {
    std::string points, model, out, scales, probs, columns, search = "grid";
    std::uint64_t seed = 0;
    std::size_t threads = 1;
};

int run_predict(const PredictArgs& a) {
    Stopwatch clock;
    RunManifest m;
    m.command = "predict";
    m.seed = a.seed;
    const auto scales = a.scales.empty() ? default_scales() : parse_scales(a.scales);
    const NetworkParams<float> params = load_checkpoint(a.model);
    m.add_input("model", a.model);
    PointCloud cloud = read_points(a.points, a.columns);
    m.add_input("points", a.points);
    if (cloud.empty()) throw DomainError(a.points + " holds no points");
    const FeatureSet features = feature_set_for_width(params.arch.input_width);
    if (features != FeatureSet::Xyz && !cloud.has_spectral)
        throw DomainError("model uses IR-R-G features but " + a.points + " has none");
    if (a.search != "grid" && a.search != "brute") throw DomainError("--search must be grid or brute");

    const double t_load = clock.seconds();
    const Prediction pred = predict(cloud, params, scales, PredictOptions{a.seed, a.threads, 64},
                                    a.search == "grid" ? NeighborSearch::Grid : NeighborSearch::BruteForce);
    const double t_pred = clock.seconds() - t_load;

    std::size_t uncovered = 0;
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        bool any = false;
        for (const auto& f : pred.per_scale) any |= f.coverage[i] > 0;
        uncovered += !any;
    }

    PointCloud labelled = cloud;
    labelled.has_spectral = true;  // output schema is always xyzirgL
    {
        auto out = create(a.out);
        write_points(out, labelled, std::span<const int>(pred.labels));
        finish(out, a.out);
    }
    if (!a.probs.empty()) {
        auto out = create(a.probs);
        write_probabilities(out, pred.probs);
        finish(out, a.probs);
    }

    m.config = {{"scales", format_scales(scales)},
                {"threads", std::to_string(a.threads)},
                {"features", to_string(features)},
                {"search", a.search},
                {"points", std::to_string(cloud.size())},
                {"interpolated_points", std::to_string(uncovered)}};
    m.timings["load"] = t_load;
    m.timings["predict"] = t_pred;
    m.timings["total"] = clock.seconds();
    m.write(sidecar(a.out, ".manifest"));
    std::cout << "predict: " << cloud.size() << " points labelled (" << uncovered << " by interpolation)\n";
    return 0;
}

// --- evaluate --------------------------------------------------------------

struct EvaluateArgs {
    std::string pred, truth, out;
    std::size_t classes = 0;
};

int run_evaluate(const EvaluateArgs& a) {
    Stopwatch clock;
    RunManifest m;
    m.command = "evaluate";
    const PointCloud pred = read_points(a.pred, "");
    const PointCloud truth = read_points(a.truth, "");
    m.add_input("pred", a.pred);
    m.add_input("truth", a.truth);
    if (!pred.has_label) throw DomainError(a.pred + " carries no labels");
    if (!truth.has_label) throw DomainError(a.truth + " carries no labels");
    const auto p = pred.labels(), t = truth.labels();
    const EvalReport rep = a.classes ? evaluate(p, t, a.classes) : evaluate(p, t);

    {
        auto out = create(a.out);
        write_report_csv(out, rep);
        finish(out, a.out);
    }
    fs::path text = a.out;
    text.replace_extension(".txt");
    if (text == fs::path(a.out)) text += ".txt";
    {
        auto out = create(text);
        write_report_text(out, rep);
        finish(out, text);
    }
    write_report_text(std::cout, rep);

    m.config = {{"classes", std::to_string(rep.class_count())},
                {"overall_accuracy", fmt_double(rep.overall_accuracy)},
                {"mean_f1", fmt_double(rep.mean_f1())}};
    m.timings["total"] = clock.seconds();
    m.write(sidecar(a.out, ".manifest"));
    return 0;
}

// --- raster2points ---------------------------------------------------------

struct RasterArgs {
    std::string dsm, image, labels, out;
};

int run_raster2points(const RasterArgs& a) {
    Stopwatch clock;
    RunManifest m;
    m.command = "raster2points";
    const Raster dsm = read_ascii_grid(a.dsm);
    const Raster image = read_image(a.image);
    m.add_input("dsm", a.dsm);
    m.add_input("image", a.image);
    std::optional<Raster> labels;
    if (!a.labels.empty()) {
        labels = read_ascii_grid(a.labels);
        m.add_input("labels", a.labels);
    }
    const PointCloud cloud = raster_to_points(dsm, image, labels ? &*labels : nullptr);
    {
        auto out = create(a.out);
        write_points(out, cloud);
        finish(out, a.out);
    }
    m.config = {{"points", std::to_string(cloud.size())}};
    m.timings["total"] = clock.seconds();
    m.write(sidecar(a.out, ".manifest"));
    std::cout << "raster2points: " << cloud.size() << " points\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Semantic labelling of 3D point clouds with a point-wise convolutional network", "pointlabel"};
    app.set_version_flag("--version", std::string(kToolVersion));
    app.require_subcommand(1);

    PreprocessArgs pa;
    auto* pre = app.add_subcommand("preprocess", "Attribute, height-normalise and tile a point cloud");
    pre->add_option("--points", pa.points, "Point file (xyz, xyzL, xyzirg or xyzirgL)")->required();
    pre->add_option("--image", pa.image, "IR-R-G image (.ppm with .wld sidecar)");
    pre->add_option("--dtm", pa.dtm, "Terrain model (ESRI ASCII grid)");
    pre->add_option("--out", pa.out, "Output directory")->required();
    pre->add_flag("--no-dtm", pa.no_dtm, "Keep absolute heights");
    pre->add_option("--columns", pa.columns, "Column roles, e.g. x,y,z,_,_,_,L");
    pre->add_option("--scales", pa.scales, "size:overlap:samples list");
    pre->add_option("--seed", pa.seed, "Sampling seed");

    TrainArgs ta;
    auto* train = app.add_subcommand("train", "Train a network on a preprocessed labelled scene");
    train->add_option("--blocks", ta.blocks, "Directory written by preprocess")->required();
    train->add_option("--out", ta.out, "Output directory")->required();
    train->add_option("--features", ta.features, "xyz, spectral or both")
        ->check(CLI::IsMember({"xyz", "spectral", "both"}));
    train->add_option("--epochs", ta.epochs, "Epoch budget")->check(CLI::PositiveNumber);
    train->add_option("--lr", ta.lr, "Initial learning rate")->check(CLI::PositiveNumber);
    train->add_option("--batch", ta.batch, "Blocks per batch")->check(CLI::PositiveNumber);
    train->add_option("--seed", ta.seed, "Seed for initialisation, split, augmentation and shuffling");
    train->add_option("--scales", ta.scales, "size:overlap:samples list");
    train->add_option("--classes", ta.classes, "Number of classes")->check(CLI::PositiveNumber);
    train->add_option("--patience", ta.patience, "Early-stopping patience")->check(CLI::PositiveNumber);
    train->add_option("--val-fraction", ta.val_fraction, "Validation share per stratum");
    train->add_option("--augment", ta.augment, "Augmented scene replicas per epoch (0 disables)");
    train->add_option("--arch", ta.arch, "default or toy")->check(CLI::IsMember({"default", "toy"}));

    PredictArgs pr;
    auto* predict_cmd = app.add_subcommand("predict", "Label a point cloud with a trained model");
    predict_cmd->add_option("--points", pr.points, "Point file")->required();
    predict_cmd->add_option("--model", pr.model, "Checkpoint written by train")->required();
    predict_cmd->add_option("--out", pr.out, "Labelled output (xyzirgL)")->required();
    predict_cmd->add_option("--scales", pr.scales, "size:overlap:samples list");
    predict_cmd->add_option("--seed", pr.seed, "Sampling seed");
    predict_cmd->add_option("--threads", pr.threads, "Worker threads")->check(CLI::PositiveNumber);
    predict_cmd->add_option("--probs", pr.probs, "Also write N x C probabilities here");
    predict_cmd->add_option("--columns", pr.columns, "Column roles, e.g. x,y,z,ir,r,g");
    predict_cmd->add_option("--search", pr.search, "grid or brute")->check(CLI::IsMember({"grid", "brute"}));

    EvaluateArgs ea;
    auto* eval = app.add_subcommand("evaluate", "Compare predicted labels with ground truth");
    eval->add_option("--pred", ea.pred, "Labelled prediction")->required();
    eval->add_option("--truth", ea.truth, "Labelled ground truth")->required();
    eval->add_option("--out", ea.out, "CSV report (text table written beside it)")->required();
    eval->add_option("--classes", ea.classes, "Class count (default: largest label + 1)");

    RasterArgs ra;
    auto* r2p = app.add_subcommand("raster2points", "Turn a DSM and an image into a point file");
    r2p->add_option("--dsm", ra.dsm, "Surface model (ESRI ASCII grid)")->required();
    r2p->add_option("--image", ra.image, "IR-R-G image (.ppm with .wld sidecar)")->required();
    r2p->add_option("--labels", ra.labels, "Optional label grid of the same size");
    r2p->add_option("--out", ra.out, "Output point file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << '\n';
        const CLI::App* sub = nullptr;
        for (const auto* s : app.get_subcommands()) sub = s;
        std::cerr << (sub ? sub->help() : app.help());
        return 2;
    }

    try {
        if (*pre) return run_preprocess(pa);
        if (*train) return run_train(ta);
        if (*predict_cmd) return run_predict(pr);
        if (*eval) return run_evaluate(ea);
        if (*r2p) return run_raster2points(ra);
    } catch (const std::exception& e) {
        std::string msg = e.what();
        for (auto& c : msg)
            if (c == '\n') c = ' ';
        std::cerr << "error: " << msg << '\n';
        return 1;
    }
    return 2;
}
