#include "cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <CLI11.hpp>

#include "lvlmlens/attnview.hpp"
#include "lvlmlens/payloads.hpp"
#include "lvlmlens/service.hpp"
#include "lvlmlens/toymodel.hpp"

namespace fs = std::filesystem;

namespace lvlmlens::cli {

namespace {

// Failure while reading the input trace: reported as a validation failure.
struct LoadFailure {
    std::string message;
};

void emit(const std::string& path, const std::string& bytes, std::ostream& out) {
    if (path == "-") {
        out << bytes;
        return;
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw Error(ErrorCode::IoError, "cannot write " + path);
}

std::string as_string(const std::vector<std::uint8_t>& bytes) { return {bytes.begin(), bytes.end()}; }

trace::Trace open_trace(const std::string& dir) {
    try {
        return trace::load_trace(dir);
    } catch (const Error& e) {
        throw LoadFailure{e.what()};
    }
}

attn::Colormap colormap_or_throw(const std::string& s) {
    if (auto cm = attn::parse_colormap(s)) return *cm;
    throw Error(ErrorCode::BadParams, "unknown colormap '" + s + "'");
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Inspect attention, relevancy and causal structure of vision-language traces", "lvlmlens"};
    app.require_subcommand(1);

    // gen-toy
    auto* gen = app.add_subcommand("gen-toy", "Run the toy model and write a trace container");
    std::uint64_t seed = 7;
    std::string gen_out, prompt_text = "3,9,17";
    int max_new = 3;
    toy::ToyConfig config;
    std::string grid_text;
    gen->add_option("--seed", seed, "Weight and image seed")->required();
    gen->add_option("--out", gen_out, "Output directory")->required();
    gen->add_option("--prompt", prompt_text, "Comma-separated prompt token ids")->capture_default_str();
    gen->add_option("--max-new", max_new, "Tokens to generate")->capture_default_str();
    gen->add_option("--d-model", config.d_model)->capture_default_str();
    gen->add_option("--layers", config.num_layers)->capture_default_str();
    gen->add_option("--heads", config.num_heads)->capture_default_str();
    gen->add_option("--vocab", config.vocab_size)->capture_default_str();
    gen->add_option("--grid", grid_text, "Patch grid as ROWSxCOLS (default 4x4)");

    // validate
    auto* val = app.add_subcommand("validate", "Check a trace container; prints the report as JSON");
    std::string val_trace;
    val->add_option("trace", val_trace)->required();

    // attention
    auto* att = app.add_subcommand("attention", "Image-to-query map or query-to-image profile");
    std::string att_trace, att_mode = "img2q", att_tokens, att_patches, att_head = "mean", att_csv, att_png,
                att_json, att_cmap = "viridis";
    int att_layer = -1;
    double att_alpha = 0.5;
    att->add_option("trace", att_trace)->required();
    att->add_option("--mode", att_mode)->check(CLI::IsMember({"img2q", "q2img"}))->capture_default_str();
    att->add_option("--tokens", att_tokens, "Query tokens for img2q, e.g. 3,4");
    att->add_option("--patches", att_patches, "Patches for q2img, e.g. 0:1,2:2");
    att->add_option("--layer", att_layer, "Layer (default last)");
    att->add_option("--head", att_head, "Head index or 'mean'")->capture_default_str();
    att->add_option("--json", att_json, "JSON output path ('-' = stdout)");
    att->add_option("--csv", att_csv, "CSV grid output path (img2q)");
    att->add_option("--png", att_png, "PNG overlay output path (img2q)");
    att->add_option("--alpha", att_alpha)->capture_default_str();
    att->add_option("--colormap", att_cmap)->capture_default_str();

    // relevancy
    auto* rel = app.add_subcommand("relevancy", "Gradient-weighted relevancy of one generated token");
    std::string rel_trace, rel_json, rel_png, rel_csv, rel_cmap = "viridis";
    int rel_token = 0, rel_begin = 0, rel_end = -1;
    double rel_alpha = 0.5;
    rel->add_option("trace", rel_trace)->required();
    rel->add_option("--token", rel_token)->required();
    rel->add_option("--json", rel_json, "JSON output path ('-' = stdout)");
    rel->add_option("--png", rel_png, "PNG overlay output path");
    rel->add_option("--csv", rel_csv, "CSV of the normalized grid");
    rel->add_option("--layer-begin", rel_begin)->capture_default_str();
    rel->add_option("--layer-end", rel_end, "Exclusive; -1 = all layers")->capture_default_str();
    rel->add_option("--alpha", rel_alpha)->capture_default_str();
    rel->add_option("--colormap", rel_cmap)->capture_default_str();

    // causal
    auto* cau = app.add_subcommand("causal", "Learn a PAG over top-k tokens and extract explanation sets");
    std::string cau_trace, cau_json, cau_graph, cau_filter = "image_only", cau_axis = "rows";
    int cau_token = 0;
    causal::CausalParams cp;
    double cau_neff = 0.0;
    cau->add_option("trace", cau_trace)->required();
    cau->add_option("--token", cau_token)->required();
    cau->add_option("--k", cp.k)->capture_default_str();
    cau->add_option("--alpha", cp.alpha)->capture_default_str();
    cau->add_option("--head", cp.head)->capture_default_str();
    cau->add_option("--radius", cp.radius)->capture_default_str();
    cau->add_option("--filter", cau_filter)->check(CLI::IsMember({"image_only", "image_and_text"}))->capture_default_str();
    cau->add_option("--max-cond", cp.max_cond_size)->capture_default_str();
    cau->add_option("--n-eff", cau_neff, "Sample size for the Fisher-z test (default seq_len)");
    cau->add_option("--feature-axis", cau_axis)->check(CLI::IsMember({"rows", "columns"}))->capture_default_str();
    cau->add_option("--json", cau_json, "JSON output path ('-' = stdout)");
    cau->add_option("--graph", cau_graph, "Text graph output path ('-' = stdout)");

    // serve
    auto* srv = app.add_subcommand("serve", "Start the HTTP service");
    service::ServiceConfig sc;
    std::string traces_dir;
    if (const char* env = std::getenv("LVLMLENS_TRACES_DIR")) traces_dir = env;
    srv->add_option("--port", sc.port)->capture_default_str();
    srv->add_option("--host", sc.host)->capture_default_str();
    srv->add_option("--traces-dir", traces_dir, "Defaults to $LVLMLENS_TRACES_DIR");
    srv->add_option("--max-traces", sc.max_traces)->capture_default_str();

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        const auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
        err << sub->help();
        return kUsage;
    }

    const char* module = "cli";
    try {
        if (*gen) {
            module = "toymodel";
            if (!grid_text.empty()) {
                const auto x = grid_text.find('x');
                if (x == std::string::npos) throw Error(ErrorCode::InvalidConfig, "grid must be ROWSxCOLS");
                config.patch_rows = payloads::parse_int(grid_text.substr(0, x), "grid rows");
                config.patch_cols = payloads::parse_int(grid_text.substr(x + 1), "grid cols");
            }
            config.seed = seed;
            config.max_new_tokens = max_new;
            const auto prompt = payloads::parse_int_list(prompt_text);
            const auto model = toy::ToyModel::init(config);
            const auto image = toy::SyntheticImage::generate(config, seed);
            const auto t = toy::toy_pipeline(model, prompt, image, max_new);
            trace::save_trace(t, gen_out);
            err << "wrote " << gen_out << " (" << t.seq_len << " tokens, " << t.generated_indices.size()
                << " generated)\n";
            return kOk;
        }
        if (*val) {
            module = "trace";
            const auto report = trace::validate_trace(val_trace);
            out << payloads::dump(report.to_json());
            return report.ok() ? kOk : kValidation;
        }
        if (*att) {
            module = "attnview";
            const auto t = open_trace(att_trace);
            const int layer = att_layer < 0 ? t.num_layers - 1 : att_layer;
            const auto head = trace::HeadSelector::parse(att_head);
            if (att_mode == "img2q") {
                const auto tokens = att_tokens.empty() ? t.generated_indices : payloads::parse_int_list(att_tokens);
                if (!att_csv.empty())
                    emit(att_csv, attn::image_to_query_map(t, tokens, layer, head).to_csv(), out);
                if (!att_png.empty())
                    emit(att_png, as_string(payloads::attention_png(t, tokens, layer, head, att_alpha,
                                                                    colormap_or_throw(att_cmap))), out);
                if (!att_json.empty() || (att_csv.empty() && att_png.empty()))
                    emit(att_json.empty() ? "-" : att_json, payloads::dump(payloads::img2q(t, tokens, layer, head)), out);
            } else {
                if (att_patches.empty()) throw Error(ErrorCode::BadParams, "q2img needs --patches");
                if (!att_csv.empty() || !att_png.empty())
                    throw Error(ErrorCode::BadParams, "--csv and --png apply to img2q only");
                const auto patches = payloads::parse_patch_list(att_patches);
                emit(att_json.empty() ? "-" : att_json, payloads::dump(payloads::q2img(t, patches, layer, head)), out);
            }
            return kOk;
        }
        if (*rel) {
            module = "relevancy";
            const auto t = open_trace(rel_trace);
            if (!rel_png.empty())
                emit(rel_png, as_string(payloads::relevancy_png(t, rel_token, rel_alpha, colormap_or_throw(rel_cmap))),
                     out);
            if (!rel_csv.empty()) {
                const auto r = relevancy::compute_relevancy(t, rel_token, {rel_begin, rel_end});
                emit(rel_csv, relevancy::image_relevancy_grid(r, t).to_csv(), out);
            }
            if (!rel_json.empty() || (rel_png.empty() && rel_csv.empty()))
                emit(rel_json.empty() ? "-" : rel_json,
                     payloads::dump(payloads::relevancy(t, rel_token, {rel_begin, rel_end})), out);
            return kOk;
        }
        if (*cau) {
            module = "causal";
            const auto t = open_trace(cau_trace);
            cp.filter = *causal::parse_filter(cau_filter);
            cp.feature_axis = *causal::parse_feature_axis(cau_axis);
            if (cau->count("--n-eff")) cp.n_eff = cau_neff;
            const auto result = causal::explain_token(t, cau_token, cp);
            if (!cau_graph.empty()) emit(cau_graph, payloads::pag_text(result), out);
            if (!cau_json.empty() || cau_graph.empty())
                emit(cau_json.empty() ? "-" : cau_json, payloads::dump(payloads::causal(t, result)), out);
            return kOk;
        }
        if (*srv) {
            module = "service";
            sc.traces_dir = traces_dir;
            sc.log = &err;
            service::Service s(sc);
            s.run();
            return kOk;
        }
    } catch (const LoadFailure& e) {
        err << "trace: " << e.message << "\n";
        return kValidation;
    } catch (const Error& e) {
        err << module << ": " << e.what() << "\n";
        return kCompute;
    } catch (const std::exception& e) {
        err << module << ": " << e.what() << "\n";
        return kCompute;
    }
    return kUsage;
}

}  // namespace lvlmlens::cli
