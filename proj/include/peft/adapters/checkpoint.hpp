#pragma once

#include <string>

#include "peft/adapters/adapted_model.hpp"
#include "peft/encoder/checkpoint.hpp"

namespace peft::checkpoint {

namespace detail {

inline nlohmann::json geometry_json(const encoder::EncoderConfig& c) {
  return {{"hidden", c.hidden}, {"layers", c.layers}};
}

inline void check_geometry(const nlohmann::json& header, const encoder::EncoderConfig& c) {
  const auto& g = header.at("geometry");
  if (g.at("hidden").get<std::size_t>() != c.hidden || g.at("layers").get<std::size_t>() != c.layers)
    throw FormatError("checkpoint geometry (hidden " + g.at("hidden").dump() + ", layers " + g.at("layers").dump() +
                      ") does not match backbone (hidden " + std::to_string(c.hidden) + ", layers " +
                      std::to_string(c.layers) + ")");
}

inline std::string head_kind_name(encoder::HeadKind k) {
  return k == encoder::HeadKind::sequence ? "sequence" : "token";
}

}  // namespace detail

/// Language-adapter file: spec + geometry header, adapter tensors.
template <class T>
void save_adapter(const std::string& path, const adapters::Adapter<T>& adapter) {
  Container c;
  c.header = {{"kind", "language_adapter"},
              {"adapter_spec", adapter.spec()},
              {"geometry", detail::geometry_json(adapter.geometry())}};
  append(c, "", adapter.params());
  write(path, c);
}

template <class T>
std::shared_ptr<adapters::Adapter<T>> load_adapter(const std::string& path, const encoder::EncoderConfig& geometry) {
  auto c = read(path);
  require_kind(c, "language_adapter");
  try {
    detail::check_geometry(c.header, geometry);
    auto spec = c.header.at("adapter_spec").get<adapters::AdapterSpec>();
    auto adapter = adapters::Adapter<T>::create(spec, geometry, 0);
    load_into(c, "", adapter.params());
    return std::make_shared<adapters::Adapter<T>>(std::move(adapter));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("adapter checkpoint header: ") + e.what());
  }
}

/// Task file: task adapter, head, and fusion parameters when the task was trained on a fusion.
template <class T>
void save_task(const std::string& path, const adapters::AdaptedModel<T>& model,
               const encoder::ClassificationHead<T>& head) {
  if (!model.task_adapter()) throw ConfigError("model has no task adapter to save");
  Container c;
  c.header = {{"kind", "task"},
              {"adapter_spec", model.task_adapter()->spec()},
              {"geometry", detail::geometry_json(model.config())},
              {"head_kind", detail::head_kind_name(head.kind)},
              {"labels", head.labels},
              {"fusion_members", model.fusion() ? model.fusion()->members() : 0},
              {"language_adapters", model.language_adapters().size()}};
  append(c, "task", model.task_adapter()->params());
  append(c, "head", head.params);
  if (model.fusion()) append(c, "fusion", model.fusion()->params());
  write(path, c);
}

template <class T>
struct LoadedTask {
  adapters::AdaptedModel<T> model;
  encoder::ClassificationHead<T> head;
};

/// Completes `language_view` (backbone + language adapters in the order they were trained
/// with) with the stored fusion, task adapter and head.
template <class T>
LoadedTask<T> load_task(const std::string& path, const adapters::AdaptedModel<T>& language_view) {
  auto c = read(path);
  require_kind(c, "task");
  try {
    const auto& cfg = language_view.config();
    detail::check_geometry(c.header, cfg);
    const auto members = c.header.at("fusion_members").get<std::size_t>();
    const auto n_la = c.header.at("language_adapters").get<std::size_t>();
    if (n_la != language_view.language_adapters().size())
      throw FormatError("task checkpoint was trained with " + std::to_string(n_la) +
                        " language adapter(s), " + std::to_string(language_view.language_adapters().size()) +
                        " supplied");
    adapters::AdaptedModel<T> model = language_view;
    if (members > 0) {
      auto fusion = adapters::Fusion<T>::create(cfg, members, 0);
      load_into(c, "fusion", fusion.params());
      model.set_fusion(std::make_shared<adapters::Fusion<T>>(std::move(fusion)));
    } else if (n_la > 1) {
      throw FormatError("task checkpoint lists several language adapters but no fusion");
    }
    auto spec = c.header.at("adapter_spec").get<adapters::AdapterSpec>();
    auto task = adapters::Adapter<T>::create(spec, cfg, 0);
    load_into(c, "task", task.params());
    model.set_task_adapter(std::make_shared<adapters::Adapter<T>>(std::move(task)));
    const auto kind = c.header.at("head_kind").get<std::string>() == "token" ? encoder::HeadKind::token
                                                                             : encoder::HeadKind::sequence;
    auto head = encoder::make_head<T>(cfg, kind, c.header.at("labels").get<std::vector<std::string>>(), 0);
    load_into(c, "head", head.params);
    return {std::move(model), std::move(head)};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("task checkpoint header: ") + e.what());
  }
}

/// Classification head alone, for tasks trained by full fine-tuning.
template <class T>
void save_head(const std::string& path, const encoder::EncoderConfig& geometry,
               const encoder::ClassificationHead<T>& head) {
  Container c;
  c.header = {{"kind", "head"},
              {"geometry", detail::geometry_json(geometry)},
              {"head_kind", detail::head_kind_name(head.kind)},
              {"labels", head.labels}};
  append(c, "", head.params);
  write(path, c);
}

template <class T>
encoder::ClassificationHead<T> load_head(const std::string& path, const encoder::EncoderConfig& geometry) {
  auto c = read(path);
  require_kind(c, "head");
  try {
    detail::check_geometry(c.header, geometry);
    const auto kind = c.header.at("head_kind").get<std::string>() == "token" ? encoder::HeadKind::token
                                                                             : encoder::HeadKind::sequence;
    auto head = encoder::make_head<T>(geometry, kind, c.header.at("labels").get<std::vector<std::string>>(), 0);
    load_into(c, "", head.params);
    return head;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("head checkpoint header: ") + e.what());
  }
}

}  // namespace peft::checkpoint
