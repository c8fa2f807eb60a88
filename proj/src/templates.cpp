#include "intentgate/templates.hpp"

#include <fstream>
#include <sstream>

#include "intentgate/rng.hpp"

namespace intentgate {

std::string load_text_asset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open asset: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    std::string text = buf.str();
    if (!text.empty() && text.back() == '\n') {
        text.pop_back();
        if (!text.empty() && text.back() == '\r') text.pop_back();
    }
    return text;
}

namespace {

bool placeholder_char(char c) {
    return (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_';
}

}  // namespace

std::string render_template(const std::string& tmpl,
                            const std::map<std::string, std::string>& vars) {
    std::string out;
    out.reserve(tmpl.size());
    std::size_t i = 0;
    while (i < tmpl.size()) {
        if (tmpl[i] != '{') {
            out += tmpl[i++];
            continue;
        }
        std::size_t j = i + 1;
        while (j < tmpl.size() && placeholder_char(tmpl[j])) ++j;
        if (j > i + 1 && j < tmpl.size() && tmpl[j] == '}') {
            auto it = vars.find(tmpl.substr(i + 1, j - i - 1));
            if (it != vars.end()) {
                out += it->second;
                i = j + 1;
                continue;
            }
        }
        out += tmpl[i++];
    }
    return out;
}

void require_placeholder(const std::string& tmpl, const std::string& token) {
    if (tmpl.find(token) == std::string::npos)
        throw MissingPlaceholder("template is missing required token " + token);
}

Fence make_fence(const std::string& tag, const std::string& payload) {
    Fence fence{"[[" + tag + "]]", "[[/" + tag + "]]"};
    std::uint64_t h = fnv1a64(payload);
    while (payload.find(fence.open) != std::string::npos ||
           payload.find(fence.close) != std::string::npos) {
        const std::string nonce = hex64(h).substr(8);
        fence.open = "[[" + tag + ":" + nonce + "]]";
        fence.close = "[[/" + tag + ":" + nonce + "]]";
        h = fnv1a64(nonce, h);
    }
    return fence;
}

std::vector<DemoExchange> demos_from_json(const json& j) {
    if (!j.is_array()) throw SchemaError(0, "demo file must hold a JSON array");
    std::vector<DemoExchange> out;
    out.reserve(j.size());
    for (std::size_t i = 0; i < j.size(); ++i) {
        DemoExchange demo;
        try {
            demo.request = j[i].at("request").get<std::string>();
            demo.response = j[i].at("response").get<std::string>();
        } catch (const json::exception& e) {
            throw SchemaError(i + 1, e.what());
        }
        if (demo.request.empty() || demo.response.empty())
            throw SchemaError(i + 1, "demo request and response must be non-empty");
        out.push_back(std::move(demo));
    }
    return out;
}

std::vector<DemoExchange> load_demo_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open demo file: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("invalid demo file " + path + ": " + e.what());
    }
    return demos_from_json(j);
}

}  // namespace intentgate
