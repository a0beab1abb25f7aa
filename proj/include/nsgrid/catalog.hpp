#pragma once

// Fixed entity catalog shared by the grammar, the environment, and the
// embedding tables. Catalog order is load-bearing: it fixes cell content
// codes and embedding rows.

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

namespace nsgrid {

enum class EntityRole { kObject, kSupport, kContainer, kDevice };

struct EntityDef {
  std::string id;  // lower_snake_case, also the surface form modulo articles
  EntityRole role;
  bool starts_open = false;  // containers only
};

inline const std::vector<EntityDef>& catalog() {
  static const std::vector<EntityDef> defs = {
      {"white_mug", EntityRole::kObject},
      {"yellow_white_mug", EntityRole::kObject},
      {"chocolate_pudding", EntityRole::kObject},
      {"alphabet_soup", EntityRole::kObject},
      {"book", EntityRole::kObject},
      {"moka_pot", EntityRole::kObject},
      {"cream_cheese", EntityRole::kObject},
      {"left_plate", EntityRole::kSupport},
      {"right_plate", EntityRole::kSupport},
      {"plate", EntityRole::kSupport},
      {"microwave", EntityRole::kContainer, false},
      {"basket", EntityRole::kContainer, true},
      {"caddy", EntityRole::kContainer, false},
      {"stove", EntityRole::kDevice},
  };
  return defs;
}

inline std::optional<std::size_t> catalog_index(const std::string& id) {
  const auto& defs = catalog();
  for (std::size_t i = 0; i < defs.size(); ++i)
    if (defs[i].id == id) return i;
  return std::nullopt;
}

inline const EntityDef* find_entity(const std::string& id) {
  auto idx = catalog_index(id);
  return idx ? &catalog()[*idx] : nullptr;
}

// ---- cell content codes -------------------------------------------------
// 0 is empty. Objects and supports get one code each; containers get a
// closed/open pair; devices an off/on pair. Pure function of catalog order.

inline int entity_code_base(std::size_t catalog_idx) {
  int code = 1;
  for (std::size_t i = 0; i < catalog_idx; ++i) {
    const auto role = catalog()[i].role;
    code += (role == EntityRole::kContainer || role == EntityRole::kDevice) ? 2
                                                                            : 1;
  }
  return code;
}

inline int num_cell_codes() {
  const auto& defs = catalog();
  return entity_code_base(defs.size());
}

}  // namespace nsgrid
