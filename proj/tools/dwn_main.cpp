// Command-line front end: synthetic data generation, training, inference,
// classical segmentation, evaluation and an end-to-end gradient check.
//
// Exit codes: 0 success, 2 configuration/data error, 3 numerical divergence.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <variant>

#include "CLI11.hpp"
#include "json.hpp"

#include "dwn/dataio.hpp"
#include "dwn/models.hpp"
#include "dwn/training.hpp"

namespace {

using nlohmann::json;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitDiverged = 3;

struct RunConfig {
    std::string model = "dn1";
    std::vector<int> channels;
    int blocks = 0;
    double tau = 0.0;
    double lambda_eps = 1.0;
    double alpha = 15.0;
    int gamma = 3;
    std::string activation = "qgamma_sig";
    int kernel_size = 3;
    dwn::TrainConfig train;
};

dwn::DoubleWellParams scheme_of(const RunConfig& c) {
    dwn::DoubleWellParams p;
    p.tau = c.tau;
    p.lambda_eps = c.lambda_eps;
    p.alpha = c.alpha;
    p.gamma = c.gamma;
    p.activation = dwn::detail::activation_from(c.activation);
    p.validate();
    return p;
}

/// Strict parse: unknown keys are rejected, every value is validated before
/// any computation starts. Missing keys fall back to the per-model defaults.
RunConfig parse_run_config(const json& j, const std::string& model_flag) {
    static const std::set<std::string> known = {
        "model",      "channels",   "blocks",     "tau",        "lambda_eps", "alpha",
        "gamma",      "activation", "kernel_size", "loss",      "learning_rate",
        "batch_size", "epochs",     "seed",       "adam_beta1", "adam_beta2", "adam_eps"};
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.count(it.key()))
            throw dwn::config_error("config: unknown key '" + it.key() + "'");

    RunConfig c;
    c.model = j.value("model", model_flag);
    if (!model_flag.empty() && c.model != model_flag)
        throw dwn::config_error("config: model '" + c.model + "' conflicts with --model " + model_flag);
    if (c.model != "dn1" && c.model != "dn2")
        throw dwn::config_error("config: model must be dn1 or dn2, got '" + c.model + "'");

    const bool dn1 = c.model == "dn1";
    c.channels = j.value("channels", dn1 ? std::vector<int>{128, 128, 128, 128, 256}
                                         : std::vector<int>{64, 64, 64, 128, 128});
    c.blocks = j.value("blocks", dn1 ? 10 : 3);
    c.tau = j.value("tau", dn1 ? 0.2 : 0.5);
    c.lambda_eps = j.value("lambda_eps", 1.0);
    c.alpha = j.value("alpha", 15.0);
    c.gamma = j.value("gamma", 3);
    c.activation = j.value("activation", "qgamma_sig");
    c.kernel_size = j.value("kernel_size", 3);

    const std::string loss = j.value("loss", "bce");
    if (loss == "bce") c.train.loss = dwn::LossKind::BCE;
    else if (loss == "l2") c.train.loss = dwn::LossKind::L2;
    else throw dwn::config_error("config: loss must be bce or l2, got '" + loss + "'");
    c.train.learning_rate = j.value("learning_rate", 1e-3);
    c.train.batch_size = j.value("batch_size", 8);
    c.train.epochs = j.value("epochs", 50);
    c.train.seed = j.value("seed", std::uint64_t{0});
    c.train.adam_beta1 = j.value("adam_beta1", 0.9);
    c.train.adam_beta2 = j.value("adam_beta2", 0.999);
    c.train.adam_eps = j.value("adam_eps", 1e-8);
    c.train.validate();

    // structural validation up front, before any data is touched (the image
    // channel count is only known later, so validate with a stand-in)
    if (c.model == "dn1") {
        dwn::DN1Config probe{1, c.channels, c.blocks, c.kernel_size, scheme_of(c)};
        probe.validate();
    } else {
        dwn::DN2Config probe{1, c.channels, c.blocks, c.kernel_size, scheme_of(c)};
        probe.validate();
    }
    return c;
}

int cmd_synth(const std::string& out_dir, int n, int size, std::uint64_t seed, double noise,
              const std::string& contrast) {
    double lo = 0.0, hi = 0.0;
    if (std::sscanf(contrast.c_str(), "%lf,%lf", &lo, &hi) != 2)
        throw dwn::config_error("--contrast expects LO,HI (e.g. 0.25,0.75)");
    dwn::Dataset ds = dwn::synth_dataset(seed, n, size, noise, {lo, hi});
    json gen = {{"n", n},        {"size", size},          {"seed", seed},
                {"noise_sd", noise}, {"contrast", {lo, hi}}};
    dwn::save_dataset(ds, out_dir, gen);
    std::cout << "wrote " << n << " image/mask pairs to " << out_dir << "\n";
    return kExitOk;
}

int cmd_train(const std::string& model_flag, const std::string& config_path,
              const std::string& data_dir, const std::string& ckpt_path,
              const std::string& metrics_path) {
    std::ifstream in(config_path);
    if (!in) throw dwn::io_error(config_path + ": cannot open config");
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw dwn::config_error(config_path + ": malformed JSON: " + e.what());
    }
    RunConfig cfg = parse_run_config(j, model_flag);

    dwn::Dataset data = dwn::load_dataset(data_dir);
    const int D = data.images.front().channels();
    for (std::size_t k = 0; k < data.size(); ++k)
        if (data.images[k].channels() != D)
            throw dwn::config_error("data: mixed channel counts in dataset");

    std::vector<dwn::MetricsRecord> records;
    auto run = [&](auto& model) {
        records = dwn::train(model, data, cfg.train);
        dwn::save_checkpoint(model, ckpt_path);
        if (!metrics_path.empty()) dwn::write_metrics_csv(records, metrics_path);
        dwn::MetricsRecord final_row;
        if (!records.empty()) final_row = records.back();
        else final_row = dwn::evaluate(model, data, cfg.train.loss);
        std::printf("final: loss=%.6g accuracy=%.2f%% dice=%.4f\n", final_row.mean_loss,
                    final_row.accuracy_pct, final_row.dice);
    };
    if (cfg.model == "dn1") {
        dwn::DN1Config mc{D, cfg.channels, cfg.blocks, cfg.kernel_size, scheme_of(cfg)};
        auto model = dwn::build_dn1(mc, cfg.train.seed);
        run(model);
    } else {
        dwn::DN2Config mc{D, cfg.channels, cfg.blocks, cfg.kernel_size, scheme_of(cfg)};
        auto model = dwn::build_dn2(mc, cfg.train.seed);
        run(model);
    }
    return kExitOk;
}

int cmd_infer(const std::string& ckpt_path, const std::string& input_path,
              const std::string& output_path, const std::string& soft_path) {
    dwn::LoadedModel model = dwn::load_checkpoint(ckpt_path);
    const dwn::Field img = dwn::load_image(input_path);
    dwn::Field pred = std::visit(
        [&](auto& m) { return dwn::detail::model_forward(m, img); }, model);
    dwn::save_image(dwn::threshold(pred), output_path);
    if (!soft_path.empty()) dwn::save_image(pred, soft_path);
    return kExitOk;
}

int cmd_segment_classical(const std::string& input_path, const std::string& output_path,
                          double tau, double lambda_eps, int gamma, double alpha, double alpha_cv,
                          int steps, const std::string& trace_path, const std::string& on_empty) {
    dwn::ClassicalConfig cfg;
    cfg.scheme = {tau, lambda_eps, alpha, gamma, dwn::Activation::QgammaProj};
    cfg.cv.alpha_cv = alpha_cv;
    if (on_empty == "error") cfg.cv.empty_region_fallback = dwn::ChanVeseParams::EmptyRegion::Error;
    else if (on_empty != "global-mean")
        throw dwn::config_error("--empty-region must be global-mean or error");
    cfg.steps = steps;

    const dwn::Field img = dwn::load_image(input_path);
    {
        const dwn::Field lum = dwn::channel_mean(img);
        const double first = lum.data()[0];
        bool constant = true;
        for (std::size_t k = 1; k < lum.size() && constant; ++k)
            constant = lum.data()[k] == first;
        if (constant)
            std::cerr << "warning: constant input image, segmentation is a threshold tie\n";
    }
    dwn::ClassicalResult res = dwn::classical_solve(img, cfg);
    dwn::save_image(dwn::threshold(res.u), output_path);
    if (!trace_path.empty()) {
        std::ofstream out(trace_path);
        if (!out) throw dwn::io_error(trace_path + ": cannot open for writing");
        out << "step,region_term,gl_gradient_term,double_well_term,total\n";
        char line[200];
        for (std::size_t s = 0; s < res.energy_trace.size(); ++s) {
            const dwn::EnergyReport& e = res.energy_trace[s];
            std::snprintf(line, sizeof(line), "%zu,%.6g,%.6g,%.6g,%.6g\n", s, e.region_term,
                          e.gl_gradient_term, e.double_well_term, e.total);
            out << line;
        }
    }
    return kExitOk;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_dir,
             const std::string& metrics_path, bool literal_accuracy) {
    dwn::LoadedModel model = dwn::load_checkpoint(ckpt_path);
    dwn::Dataset data = dwn::load_dataset(data_dir);
    const auto mode = literal_accuracy ? dwn::AccuracyMode::LiteralAnd : dwn::AccuracyMode::Agreement;
    dwn::MetricsRecord r = std::visit(
        [&](auto& m) { return dwn::evaluate(m, data, dwn::LossKind::BCE, mode); }, model);
    if (!metrics_path.empty()) dwn::write_metrics_csv({r}, metrics_path);
    std::printf("loss=%.6g accuracy=%.2f%% dice=%.4f\n", r.mean_loss, r.accuracy_pct, r.dice);
    return kExitOk;
}

/// End-to-end reverse-mode vs central finite differences on a tiny model.
/// `corrupt` deliberately breaks one analytic gradient entry so the check's
/// sensitivity itself can be tested.
int cmd_gradcheck(const std::string& model_kind, std::uint64_t seed, double eps, bool corrupt) {
    const int N = 16;
    dwn::Rng rng(dwn::substream(seed, 0x67636b));
    dwn::Field img(N, N, 1);
    for (double& v : img.raw()) v = rng.uniform();
    dwn::Field mask(N, N, 1);
    for (double& v : mask.raw()) v = rng.uniform() < 0.5 ? 0.0 : 1.0;

    // Freshly built models carry zero biases, which parks some ReLU
    // pre-activations exactly on the kink; the comparison must happen at a
    // generic point, so every bias is moved off zero first.
    auto nudge_biases = [&rng](std::vector<dwn::TensorView> views) {
        for (auto& t : views)
            if (t.name.ends_with("bias"))
                for (std::size_t e = 0; e < t.size; ++e) t.data[e] = rng.uniform(-0.1, 0.1);
    };

    auto check = [&](auto& model) {
        auto loss_of = [&] {
            auto fw = [&] {
                if constexpr (std::is_same_v<std::decay_t<decltype(model)>, dwn::DNIParams>)
                    return dwn::dn1_forward(img, model);
                else
                    return dwn::dn2_forward(img, model);
            }();
            return dwn::loss_and_grad(fw.pred, mask, dwn::LossKind::BCE);
        };
        auto fw_grad = [&] {
            auto fwd = [&] {
                if constexpr (std::is_same_v<std::decay_t<decltype(model)>, dwn::DNIParams>)
                    return dwn::dn1_forward(img, model);
                else
                    return dwn::dn2_forward(img, model);
            }();
            auto [lv, lg] = dwn::loss_and_grad(fwd.pred, mask, dwn::LossKind::BCE);
            (void)lv;
            return dwn::dn_backward(model, fwd.tape, lg);
        }();

        auto params = model.manifest();
        auto grads = fw_grad.manifest();
        if (corrupt && !grads.empty() && grads.front().size > 0) grads.front().data[0] += 1e-3;

        double max_rel = 0.0;
        std::string worst = "-";
        for (std::size_t t = 0; t < params.size(); ++t) {
            for (std::size_t e = 0; e < params[t].size; ++e) {
                double& p = params[t].data[e];
                const double saved = p;
                p = saved + eps;
                const double lp = loss_of().first;
                p = saved - eps;
                const double lm = loss_of().first;
                p = saved;
                const double fd = (lp - lm) / (2.0 * eps);
                const double an = grads[t].data[e];
                const double denom = std::max({std::abs(fd), std::abs(an), 1e-4});
                const double rel = std::abs(fd - an) / denom;
                if (rel > max_rel) {
                    max_rel = rel;
                    worst = params[t].name + "[" + std::to_string(e) + "]";
                }
            }
        }
        std::printf("max relative error %.3e at %s over %zu tensors\n", max_rel, worst.c_str(),
                    params.size());
        return max_rel <= 1e-5 ? kExitOk : 1;
    };

    dwn::DoubleWellParams scheme{model_kind == "dn1" ? 0.2 : 0.5, 1.0, 15.0, 3,
                                 dwn::Activation::QgammaSig};
    if (model_kind == "dn1") {
        dwn::DN1Config cfg{1, {2}, 2, 3, scheme};
        auto model = dwn::build_dn1(cfg, seed);
        nudge_biases(model.manifest());
        return check(model);
    }
    if (model_kind == "dn2") {
        dwn::DN2Config cfg{1, {2}, 2, 3, scheme};
        auto model = dwn::build_dn2(cfg, seed);
        nudge_biases(model.manifest());
        return check(model);
    }
    throw dwn::config_error("--model must be dn1 or dn2");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Double-well segmentation networks: training, inference and a classical solver"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "Generate a synthetic shape dataset");
    std::string synth_out;
    int synth_n = 100, synth_size = 64;
    std::uint64_t synth_seed = 0;
    double synth_noise = 0.1;
    std::string synth_contrast = "0.25,0.75";
    synth->add_option("--out", synth_out, "Output directory")->required();
    synth->add_option("--n", synth_n, "Number of samples");
    synth->add_option("--size", synth_size, "Image side length (multiple of 16)");
    synth->add_option("--seed", synth_seed, "Generator seed");
    synth->add_option("--noise", synth_noise, "Gaussian noise standard deviation");
    synth->add_option("--contrast", synth_contrast, "Background,foreground levels LO,HI");

    // train
    auto* train = app.add_subcommand("train", "Train a model on a dataset directory");
    std::string train_model, train_config, train_data, train_ckpt, train_metrics;
    train->add_option("--model", train_model, "dn1 or dn2")->required();
    train->add_option("--config", train_config, "JSON run configuration")->required();
    train->add_option("--data", train_data, "Dataset directory (manifest.json)")->required();
    train->add_option("--out", train_ckpt, "Checkpoint output path")->required();
    train->add_option("--metrics", train_metrics, "Per-epoch metrics CSV");

    // infer
    auto* infer = app.add_subcommand("infer", "Segment one image with a trained checkpoint");
    std::string infer_ckpt, infer_in, infer_out, infer_soft;
    infer->add_option("--ckpt", infer_ckpt, "Checkpoint path")->required();
    infer->add_option("--input", infer_in, "Input image (PGM/PPM)")->required();
    infer->add_option("--output", infer_out, "Binary mask output (PGM)")->required();
    infer->add_option("--soft", infer_soft, "Optional soft probability output (PGM)");

    // segment-classical
    auto* cls = app.add_subcommand("segment-classical",
                                   "Segment one image with the non-learned solver");
    std::string cls_in, cls_out, cls_trace, cls_empty = "global-mean";
    double cls_tau = 0.2, cls_le = 1.0, cls_alpha = 15.0, cls_alpha_cv = 0.25;
    int cls_gamma = 3, cls_steps = 100;
    cls->add_option("--input", cls_in, "Input image (PGM/PPM)")->required();
    cls->add_option("--output", cls_out, "Binary mask output (PGM)")->required();
    cls->add_option("--tau", cls_tau, "Time step");
    cls->add_option("--lambda-eps", cls_le, "Diffusion coefficient (lambda*eps)");
    cls->add_option("--gamma", cls_gamma, "Fixed-point iterations per step");
    cls->add_option("--alpha", cls_alpha, "Proximal weight 2*tau*lambda/eps");
    cls->add_option("--alpha-cv", cls_alpha_cv, "Chan-Vese contrast scaling");
    cls->add_option("--steps", cls_steps, "Splitting steps");
    cls->add_option("--energy-trace", cls_trace, "Per-step energy CSV");
    cls->add_option("--empty-region", cls_empty, "Empty-region policy: global-mean or error");

    // eval
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
    std::string eval_ckpt, eval_data, eval_metrics;
    bool eval_literal = false;
    eval->add_option("--ckpt", eval_ckpt, "Checkpoint path")->required();
    eval->add_option("--data", eval_data, "Dataset directory")->required();
    eval->add_option("--metrics", eval_metrics, "Metrics CSV output");
    eval->add_flag("--literal-accuracy", eval_literal,
                   "Count only true-positive pixels instead of agreement");

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of the end-to-end gradients");
    std::string gc_model = "dn1";
    std::uint64_t gc_seed = 0;
    double gc_eps = 1e-6;
    bool gc_corrupt = false;
    gc->add_option("--model", gc_model, "dn1 or dn2");
    gc->add_option("--seed", gc_seed, "Seed for parameters and data");
    gc->add_option("--eps", gc_eps, "Finite-difference step");
    gc->add_flag("--corrupt-gradient", gc_corrupt, "Test hook: break one analytic gradient entry")
        ->group("");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (synth->parsed())
            return cmd_synth(synth_out, synth_n, synth_size, synth_seed, synth_noise, synth_contrast);
        if (train->parsed())
            return cmd_train(train_model, train_config, train_data, train_ckpt, train_metrics);
        if (infer->parsed()) return cmd_infer(infer_ckpt, infer_in, infer_out, infer_soft);
        if (cls->parsed())
            return cmd_segment_classical(cls_in, cls_out, cls_tau, cls_le, cls_gamma, cls_alpha,
                                         cls_alpha_cv, cls_steps, cls_trace, cls_empty);
        if (eval->parsed()) return cmd_eval(eval_ckpt, eval_data, eval_metrics, eval_literal);
        if (gc->parsed()) return cmd_gradcheck(gc_model, gc_seed, gc_eps, gc_corrupt);
    } catch (const dwn::divergence_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitDiverged;
    } catch (const dwn::config_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const dwn::io_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    }
    return kExitConfig;
}
