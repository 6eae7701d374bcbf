#include <json.hpp>

#include <cstring>
#include <fstream>
#include <sstream>

#include "ifsr/protocol.hpp"

namespace ifsr::proto {
namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'I', 'F', 'S', 'R', 'C', 'K', 'P', '1'};

struct NamedBlock {
    std::string name;
    const Mat* mat;
};

std::vector<NamedBlock> block_directory(const Model& m) {
    std::vector<NamedBlock> blocks;
    const auto& w = *m.trunk;
    blocks.push_back({"trunk.proto", &w.prototypes()});
    blocks.push_back({"trunk.w1", &w.w1()});
    blocks.push_back({"trunk.b1", &w.b1()});
    blocks.push_back({"trunk.w2", &w.w2()});
    blocks.push_back({"trunk.b2", &w.b2()});
    blocks.push_back({"box.ref1", &m.box_ref1});
    return blocks;
}

std::string hex64(std::uint64_t x) {
    std::ostringstream os;
    os << std::hex << x;
    return os.str();
}

void write_mat(std::ofstream& out, const Mat& m) {
    out.write(reinterpret_cast<const char*>(m.v.data()),
              static_cast<std::streamsize>(m.v.size() * sizeof(double)));
}

Mat read_mat(std::ifstream& in, std::size_t rows, std::size_t cols) {
    Mat m(rows, cols);
    in.read(reinterpret_cast<char*>(m.v.data()),
            static_cast<std::streamsize>(m.v.size() * sizeof(double)));
    if (!in) throw MissingArtifact("checkpoint: truncated payload");
    return m;
}

}  // namespace

void save_checkpoint(const Model& m, const std::string& path) {
    require(m.trunk != nullptr, "save_checkpoint: model has no trunk");
    const bool softmax = m.spec().classifier == ClassifierMode::softmax;

    // per-class rows live in their own blocks so that merging is concatenation
    std::vector<std::pair<std::string, Mat>> row_blocks;
    for (std::size_t r = 0; r < m.registry.size(); ++r) {
        const std::string id = std::to_string(m.registry[r].id);
        Mat mu(1, m.post.mu.cols);
        std::copy(m.post.mu.row(r), m.post.mu.row(r) + m.post.mu.cols, mu.v.begin());
        row_blocks.emplace_back("cls.mu." + id, std::move(mu));
        if (m.post.row_has_var(r)) {
            Mat rho(1, m.post.rho.cols);
            std::copy(m.post.rho.row(r), m.post.rho.row(r) + m.post.rho.cols, rho.v.begin());
            row_blocks.emplace_back("cls.rho." + id, std::move(rho));
        }
        row_blocks.emplace_back("box.pred." + id, m.box_pred[r]);
        row_blocks.emplace_back("box.ref2." + id, m.box_ref2[r]);
        Mat mw(1, m.mask_head.W.cols);
        std::copy(m.mask_head.W.row(r), m.mask_head.W.row(r) + m.mask_head.W.cols, mw.v.begin());
        row_blocks.emplace_back("mask.w." + id, std::move(mw));
        if (softmax) {
            Mat sw(1, m.softmax_w.cols);
            std::copy(m.softmax_w.row(r), m.softmax_w.row(r) + m.softmax_w.cols, sw.v.begin());
            row_blocks.emplace_back("softmax.w." + id, std::move(sw));
        }
    }
    if (softmax) {
        Mat bg(1, m.softmax_w.cols);
        const std::size_t last = m.softmax_w.rows - 1;
        std::copy(m.softmax_w.row(last), m.softmax_w.row(last) + m.softmax_w.cols, bg.v.begin());
        row_blocks.emplace_back("softmax.bg", std::move(bg));
    }

    json header;
    header["kind"] = "ifsr_checkpoint";
    header["version"] = 1;
    header["config"] = m.config.entries();
    header["trunk_fingerprint"] = hex64(m.trunk->fingerprint());
    json registry = json::array();
    for (const auto& e : m.registry) registry.push_back({{"id", e.id}, {"base", e.is_base}});
    header["registry"] = registry;

    json blocks = json::array();
    const auto shared = block_directory(m);
    for (const auto& b : shared)
        blocks.push_back({{"name", b.name}, {"rows", b.mat->rows}, {"cols", b.mat->cols}});
    for (const auto& [name, mat] : row_blocks)
        blocks.push_back({{"name", name}, {"rows", mat.rows}, {"cols", mat.cols}});
    header["blocks"] = blocks;

    const std::string header_str = header.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw MissingArtifact("save_checkpoint: cannot open " + path);
    out.write(kMagic, sizeof(kMagic));
    const std::uint64_t hlen = header_str.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    for (const auto& b : shared) write_mat(out, *b.mat);
    for (const auto& [name, mat] : row_blocks) write_mat(out, mat);
    if (!out) throw MissingArtifact("save_checkpoint: write failed for " + path);
}

Model load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifact("load_checkpoint: cannot open " + path);

    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw MissingArtifact("load_checkpoint: not a checkpoint file: " + path);
    std::uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string header_str(hlen, '\0');
    in.read(header_str.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw MissingArtifact("load_checkpoint: truncated header");

    const json header = json::parse(header_str);
    require(header.at("kind") == "ifsr_checkpoint" && header.at("version") == 1,
            "load_checkpoint: unsupported container version");

    Model m;
    for (const auto& [k, v] : header.at("config").items())
        m.config.set(k, v.get<std::string>());
    m.config.validate();
    for (const auto& e : header.at("registry"))
        m.registry.push_back({e.at("id").get<int>(), e.at("base").get<bool>()});

    std::map<std::string, Mat> blocks;
    for (const auto& b : header.at("blocks")) {
        const auto name = b.at("name").get<std::string>();
        blocks.emplace(name,
                       read_mat(in, b.at("rows").get<std::size_t>(), b.at("cols").get<std::size_t>()));
    }

    const auto wc = m.config.world_config();
    m.trunk = std::make_shared<world::World>(wc, blocks.at("trunk.proto"), blocks.at("trunk.w1"),
                                             blocks.at("trunk.b1"), blocks.at("trunk.w2"),
                                             blocks.at("trunk.b2"));
    require(hex64(m.trunk->fingerprint()) == header.at("trunk_fingerprint").get<std::string>(),
            "load_checkpoint: trunk fingerprint mismatch");

    m.box_ref1 = blocks.at("box.ref1");
    const std::size_t d = wc.feat_dim;
    const std::size_t rows = m.registry.size();
    m.post.mu = Mat(rows, d);
    m.post.rho = Mat(rows, d);
    m.post.has_var.assign(rows, 0);
    m.mask_head.W = Mat(rows, wc.mask_feat_dim);

    const bool softmax = m.spec().classifier == ClassifierMode::softmax;
    if (softmax) m.softmax_w = Mat(rows + 1, d);

    for (std::size_t r = 0; r < rows; ++r) {
        const std::string id = std::to_string(m.registry[r].id);
        const Mat& mu = blocks.at("cls.mu." + id);
        std::copy(mu.v.begin(), mu.v.end(), m.post.mu.row(r));
        auto rho_it = blocks.find("cls.rho." + id);
        if (rho_it != blocks.end()) {
            std::copy(rho_it->second.v.begin(), rho_it->second.v.end(), m.post.rho.row(r));
            m.post.has_var[r] = 1;
        }
        m.box_pred.push_back(blocks.at("box.pred." + id));
        m.box_ref2.push_back(blocks.at("box.ref2." + id));
        const Mat& mw = blocks.at("mask.w." + id);
        std::copy(mw.v.begin(), mw.v.end(), m.mask_head.W.row(r));
        if (softmax) {
            const Mat& sw = blocks.at("softmax.w." + id);
            std::copy(sw.v.begin(), sw.v.end(), m.softmax_w.row(r));
        }
    }
    if (softmax) {
        const Mat& bg = blocks.at("softmax.bg");
        std::copy(bg.v.begin(), bg.v.end(), m.softmax_w.row(rows));
    }
    return m;
}

namespace {

json scene_to_json(const world::Scene& s) {
    json js;
    js["seed"] = s.seed;
    json objs = json::array();
    for (const auto& o : s.objects) {
        json jo;
        jo["class"] = o.class_id;
        jo["box"] = {o.bbox.l, o.bbox.t, o.bbox.r, o.bbox.b};
        jo["app"] = o.appearance_seed;
        if (o.occl.occluded) jo["occl"] = {o.occl.side, o.occl.fraction};
        objs.push_back(jo);
    }
    js["objects"] = objs;
    return js;
}

world::Scene scene_from_json(const json& js) {
    world::Scene s;
    s.seed = js.at("seed").get<std::uint64_t>();
    for (const auto& jo : js.at("objects")) {
        world::SceneObject o;
        o.class_id = jo.at("class").get<int>();
        o.appearance_seed = jo.at("app").get<std::uint64_t>();
        const auto& b = jo.at("box");
        o.bbox = {b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
                  b.at(3).get<double>()};
        if (jo.contains("occl")) {
            o.occl.occluded = true;
            o.occl.side = jo.at("occl").at(0).get<int>();
            o.occl.fraction = jo.at("occl").at(1).get<double>();
        }
        s.objects.push_back(o);
    }
    return s;
}

}  // namespace

void save_dataset(const world::Dataset& ds, const cfg::Config& config, const std::string& path) {
    json root;
    root["kind"] = "ifsr_dataset";
    root["version"] = 1;
    root["config"] = config.entries();
    json splits;
    for (const auto& [name, scenes] :
         {std::pair<const char*, const std::vector<world::Scene>*>{"base", &ds.base},
          {"shots", &ds.shots},
          {"test", &ds.test}}) {
        json arr = json::array();
        for (const auto& s : *scenes) arr.push_back(scene_to_json(s));
        splits[name] = arr;
    }
    root["splits"] = splits;

    std::ofstream out(path);
    if (!out) throw MissingArtifact("save_dataset: cannot open " + path);
    out << root.dump(1) << "\n";
}

world::Dataset load_dataset(const std::string& path, const cfg::Config& expected) {
    std::ifstream in(path);
    if (!in) throw MissingArtifact("load_dataset: cannot open " + path);
    json root;
    try {
        in >> root;
    } catch (const std::exception& e) {
        throw MissingArtifact("load_dataset: bad file " + path + ": " + e.what());
    }
    require(root.at("kind") == "ifsr_dataset" && root.at("version") == 1,
            "load_dataset: unsupported container version");

    // the dataset must describe the same world the config asks for
    const auto& stored = root.at("config");
    for (const auto& [k, v] : expected.entries()) {
        if (k.rfind("world.", 0) != 0 && k != "seed") continue;
        require(stored.contains(k) && stored.at(k).get<std::string>() == v,
                "load_dataset: dataset was generated with a different '" + k + "'");
    }

    world::Dataset ds;
    for (const auto& js : root.at("splits").at("base")) ds.base.push_back(scene_from_json(js));
    for (const auto& js : root.at("splits").at("shots")) ds.shots.push_back(scene_from_json(js));
    for (const auto& js : root.at("splits").at("test")) ds.test.push_back(scene_from_json(js));
    return ds;
}

}  // namespace ifsr::proto
