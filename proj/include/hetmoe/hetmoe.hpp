#pragma once

#include "hetmoe/adapt.hpp"
#include "hetmoe/error.hpp"
#include "hetmoe/gradcheck.hpp"
#include "hetmoe/joint_buffer.hpp"
#include "hetmoe/model.hpp"
#include "hetmoe/moe.hpp"
#include "hetmoe/ndgrad/ops.hpp"
#include "hetmoe/ndgrad/tape.hpp"
#include "hetmoe/ndgrad/tensor.hpp"
#include "hetmoe/objectives.hpp"
#include "hetmoe/rng.hpp"
#include "hetmoe/serialize.hpp"
#include "hetmoe/synthdata.hpp"
#include "hetmoe/task.hpp"
#include "hetmoe/trainer.hpp"
