#pragma once

// Demonstration files: line-delimited JSON, one header line carrying the
// task definition (instruction, goal list in the strict plan schema, seed)
// followed by one record per environment step.

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "nsgrid/env.hpp"

namespace nsgrid {

struct DemoStep {
  Observation obs;
  ActionVec action;
  int true_primitive_index = 1;
  double r_task = 0.0;
  bool done = false;
};

struct Demo {
  Task task;
  std::vector<DemoStep> steps;
};

namespace demo_json {

inline nlohmann::ordered_json obs_to_json(const Observation& o) {
  nlohmann::ordered_json j;
  j["width"] = o.width;
  j["cells"] = o.cells;
  j["proprio"] = o.proprio;
  return j;
}

inline Observation obs_from_json(const nlohmann::ordered_json& j) {
  Observation o;
  o.width = j.at("width").get<int>();
  o.cells = j.at("cells").get<std::vector<int>>();
  const auto p = j.at("proprio").get<std::vector<double>>();
  if (p.size() != kProprioDim)
    throw std::runtime_error("demo: bad proprio length");
  std::copy(p.begin(), p.end(), o.proprio.begin());
  return o;
}

}  // namespace demo_json

inline std::string demo_to_jsonl(const Demo& demo) {
  std::ostringstream out;
  nlohmann::ordered_json header;
  header["instruction"] = demo.task.instruction;
  header["goals"] = nlohmann::ordered_json::parse(plan_to_json(demo.task.plan));
  header["seed"] = demo.task.seed;
  header["distractors"] = demo.task.extra_distractors;
  out << header.dump() << '\n';
  for (const auto& s : demo.steps) {
    nlohmann::ordered_json rec;
    rec["observation"] = demo_json::obs_to_json(s.obs);
    rec["action"] = s.action.to_array();
    rec["true_primitive_index"] = s.true_primitive_index;
    rec["r_task"] = s.r_task;
    rec["done"] = s.done;
    out << rec.dump() << '\n';
  }
  return out.str();
}

inline Demo demo_from_jsonl(std::istream& in) {
  Demo demo;
  std::string line;
  if (!std::getline(in, line))
    throw std::runtime_error("demo: missing header line");
  const auto header = nlohmann::ordered_json::parse(line);
  demo.task.instruction = header.at("instruction").get<std::string>();
  demo.task.plan = plan_from_json(header.at("goals").dump());
  demo.task.seed = header.at("seed").get<std::uint64_t>();
  demo.task.extra_distractors = header.value("distractors", 0);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto rec = nlohmann::ordered_json::parse(line);
    DemoStep s;
    s.obs = demo_json::obs_from_json(rec.at("observation"));
    const auto a = rec.at("action").get<std::vector<double>>();
    if (a.size() != 4) throw std::runtime_error("demo: bad action length");
    s.action = ActionVec{a[0], a[1], a[2], a[3]};
    s.true_primitive_index = rec.at("true_primitive_index").get<int>();
    s.r_task = rec.at("r_task").get<double>();
    s.done = rec.at("done").get<bool>();
    demo.steps.push_back(std::move(s));
  }
  if (demo.steps.empty()) throw std::runtime_error("demo: no step records");
  return demo;
}

inline void write_demo_file(const Demo& demo, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write demo file " + path);
  out << demo_to_jsonl(demo);
}

inline Demo read_demo_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read demo file " + path);
  return demo_from_jsonl(in);
}

}  // namespace nsgrid
