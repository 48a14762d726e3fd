#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lvlmlens/causal/explain.hpp"
#include "lvlmlens/colormap.hpp"
#include "lvlmlens/relevancy.hpp"
#include "lvlmlens/trace.hpp"

// JSON documents shared by the CLI and the HTTP service, so both emit identical bytes.
namespace lvlmlens::payloads {

inline constexpr const char* kEngineVersion = "lvlmlens-0.1.0";

nlohmann::json img2q(const trace::Trace& trace, std::span<const int> tokens, int layer, trace::HeadSelector head);
nlohmann::json q2img(const trace::Trace& trace, std::span<const trace::PatchCoord> patches, int layer,
                     trace::HeadSelector head);
nlohmann::json summary(const trace::Trace& trace, int token);
nlohmann::json relevancy(const trace::Trace& trace, int generated, relevancy::LayerRange layers = {});
nlohmann::json causal(const trace::Trace& trace, const causal::CausalResult& result);
nlohmann::json trace_listing(const std::string& trace_id, const trace::Trace& trace);
nlohmann::json error(std::string_view code, const std::string& message);

/// Max-normalized relevancy grid blended over the trace image.
std::vector<std::uint8_t> relevancy_png(const trace::Trace& trace, int generated, double alpha, attn::Colormap cm);
/// Max-normalized img2q grid blended over the trace image.
std::vector<std::uint8_t> attention_png(const trace::Trace& trace, std::span<const int> tokens, int layer,
                                        trace::HeadSelector head, double alpha, attn::Colormap cm);

/// One `i <markL>-<markR> j` line per edge, token indices as node names.
std::string pag_text(const causal::CausalResult& result);

/// Serialization used for every JSON response and CLI output.
std::string dump(const nlohmann::json& doc);

/// "3,4,7" -> {3,4,7}. Throws BadParams.
std::vector<int> parse_int_list(const std::string& s);
/// "0:1,2:2" -> {(0,1),(2,2)}. Throws BadParams.
std::vector<trace::PatchCoord> parse_patch_list(const std::string& s);
int parse_int(const std::string& s, const char* name);
double parse_double(const std::string& s, const char* name);

}  // namespace lvlmlens::payloads
