#pragma once

#include "nvs/errors.hpp"
#include "nvs/tensor.hpp"
#include "nvs/ops.hpp"
#include "nvs/geometry.hpp"
#include "nvs/warp.hpp"
#include "nvs/model.hpp"
#include "nvs/losses.hpp"
#include "nvs/image_io.hpp"
#include "nvs/serialize.hpp"
#include "nvs/render.hpp"
#include "nvs/dataset.hpp"
#include "nvs/metrics.hpp"
#include "nvs/trainer.hpp"
#include "nvs/gradcheck.hpp"
