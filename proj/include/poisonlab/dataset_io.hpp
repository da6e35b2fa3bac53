#pragma once

// On-disk dataset layout: images/<id>.png + manifest.jsonl (one object per
// line) + world.json with the generating config and master seed.

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "poisonlab/common.hpp"
#include "poisonlab/image.hpp"
#include "poisonlab/decompose.hpp"
#include "poisonlab/poisoner.hpp"
#include "poisonlab/synthworld.hpp"

namespace poisonlab {

using nlohmann::json;

inline json world_config_to_json(const WorldConfig& c) {
    return json{{"canvas_h", c.canvas_h}, {"canvas_w", c.canvas_w},   {"count", c.count},
                {"targets", c.targets},   {"n_choices", c.n_choices}, {"scale_min", c.scale_min},
                {"scale_max", c.scale_max}};
}

inline WorldConfig world_config_from_json(const json& j) {
    WorldConfig c;
    c.canvas_h = j.at("canvas_h").get<int>();
    c.canvas_w = j.at("canvas_w").get<int>();
    c.count = j.at("count").get<int>();
    c.targets = j.at("targets").get<int>();
    c.n_choices = j.at("n_choices").get<std::vector<int>>();
    c.scale_min = j.at("scale_min").get<double>();
    c.scale_max = j.at("scale_max").get<double>();
    return c;
}

inline json record_to_manifest_line(const Record& r) {
    json j{{"id", r.id}, {"file", r.file}, {"caption", r.caption}, {"split", split_name(r.split)}};
    if (!r.target_id.empty()) j["target_id"] = r.target_id;
    if (!r.element_phrase.empty()) j["element_phrase"] = r.element_phrase;
    if (r.sim_to_target >= 0.0) j["sim_to_target"] = r.sim_to_target;
    if (r.attempts > 0) j["attempts"] = r.attempts;
    return j;
}

// Write images/, manifest.jsonl and world.json under root.
inline void write_dataset(const Dataset& ds, const std::filesystem::path& root) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(root / "images", ec);
    if (ec) throw std::runtime_error("write_dataset: cannot create " + (root / "images").string() +
                                     ": " + ec.message());
    std::ofstream manifest(root / "manifest.jsonl", std::ios::binary);
    if (!manifest) throw std::runtime_error("write_dataset: cannot open manifest.jsonl under " +
                                            root.string());
    for (const auto& r : ds.records) {
        write_png(root / r.file, r.image);
        manifest << record_to_manifest_line(r).dump() << "\n";
    }
    if (!manifest) throw std::runtime_error("write_dataset: manifest write failed");
    json world{{"config", world_config_to_json(ds.config)},
               {"seed", ds.seed},
               {"descriptor", ds.descriptor_version}};
    write_text_file(root / "world.json", world.dump(2) + "\n");
}

// Load a dataset directory written by write_dataset. Images are re-read from
// PNG; captions and provenance come from the manifest.
inline Dataset read_dataset(const std::filesystem::path& root) {
    Dataset ds;
    ds.root = root.string();
    const json world = json::parse(read_text_file(root / "world.json"));
    ds.config = world_config_from_json(world.at("config"));
    ds.seed = world.at("seed").get<std::uint64_t>();
    ds.descriptor_version = world.value("descriptor", "d1");

    std::ifstream manifest(root / "manifest.jsonl");
    if (!manifest) throw std::runtime_error("read_dataset: missing manifest.jsonl under " +
                                            root.string());
    std::string line;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        const json j = json::parse(line);
        Record r;
        r.id = j.at("id").get<std::string>();
        r.file = j.at("file").get<std::string>();
        r.caption = j.at("caption").get<std::string>();
        r.split = split_from_name(j.at("split").get<std::string>());
        r.target_id = j.value("target_id", "");
        r.element_phrase = j.value("element_phrase", "");
        r.sim_to_target = j.value("sim_to_target", -1.0);
        r.attempts = j.value("attempts", 0);
        r.image = read_png(root / r.file);
        ds.records.push_back(std::move(r));
    }
    return ds;
}

// decomposition.json for one target.
inline json decomposition_to_json(const std::string& target_id, const std::string& backend,
                                  const std::vector<DecomposedElement>& els) {
    json elements = json::array();
    for (std::size_t i = 0; i < els.size(); ++i) {
        const auto& e = els[i];
        elements.push_back(json{{"phrase", e.phrase},
                                {"bbox", {e.bbox.y0, e.bbox.x0, e.bbox.y1, e.bbox.x1}},
                                {"rle_mask", rle_encode(e.mask)},
                                {"crop_file", "crops/" + target_id + "_" + std::to_string(i) + ".png"}});
    }
    return json{{"target_id", target_id}, {"backend", backend}, {"elements", elements}};
}

inline void write_decomposition(const std::filesystem::path& dir, const std::string& target_id,
                                const std::string& backend,
                                const std::vector<DecomposedElement>& els) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir / "crops", ec);
    const json j = decomposition_to_json(target_id, backend, els);
    for (std::size_t i = 0; i < els.size(); ++i)
        write_png(dir / j.at("elements").at(i).at("crop_file").get<std::string>(), els[i].crop);
    write_text_file(dir / "decomposition.json", j.dump(2) + "\n");
}

// poison_run.json: thresholds, budget and seeds of one poison generation.
inline json poison_run_to_json(const PoisonSet& set) {
    return json{{"target_id", set.target_id},
                {"tau", set.tau},
                {"gamma", set.thresholds.gamma},
                {"delta", set.thresholds.delta},
                {"budget",
                 {{"ratio", set.budget.ratio},
                  {"per_element", set.budget.per_element},
                  {"max_attempts", set.budget.max_attempts},
                  {"k", set.k}}},
                {"seed", set.seed},
                {"pairs", set.pairs.size()},
                {"warnings", set.warnings}};
}

}  // namespace poisonlab
