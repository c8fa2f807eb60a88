#pragma once

#include <map>
#include <string>
#include <vector>

#include "intentgate/core.hpp"

namespace intentgate {

/// Reads a whole file; exactly one trailing newline is chomped so that
/// template bytes do not depend on editor newline habits.
std::string load_text_asset(const std::string& path);

/// Substitutes {NAME} tokens (NAME in [A-Z0-9_]+) from `vars` in one pass.
/// Substituted values are never rescanned, so payload text cannot inject
/// further placeholders. Unknown tokens pass through verbatim.
std::string render_template(const std::string& tmpl,
                            const std::map<std::string, std::string>& vars);

/// Throws MissingPlaceholder unless `token` occurs in `tmpl`.
void require_placeholder(const std::string& tmpl, const std::string& token);

/// Delimiter pair wrapping an untrusted payload inside a guard prompt.
struct Fence {
    std::string open;
    std::string close;
};

/// "[[TAG]]".."[[/TAG]]", switching to a payload-hash nonce form
/// "[[TAG:xxxxxxxx]]" whenever the payload contains the delimiters.
/// Deterministic in (tag, payload).
Fence make_fence(const std::string& tag, const std::string& payload);

/// [{"request": str, "response": str}, ...]
std::vector<DemoExchange> load_demo_file(const std::string& path);
std::vector<DemoExchange> demos_from_json(const json& j);

}  // namespace intentgate
